#ifndef REFKV_AUTODIFF_HPP
#define REFKV_AUTODIFF_HPP

#include <functional>
#include <vector>

#include "refkv/tensor.hpp"

namespace refkv {

// Reverse-mode tape. Ops append one backward closure per recorded op;
// backward() replays them in exact reverse order, accumulating gradients
// additively, then clears the tape.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    void run_backward();

private:
    std::vector<std::function<void()>> nodes_;
};

Tape& tape();

bool grad_enabled();
void set_grad_enabled(bool);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Fills grads of every requires_grad tensor reachable from `loss` and clears
// the tape. `loss` must be a scalar.
void backward(const Tensor& loss);

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    int probes = 0;
};

// Compares the analytic gradient of a scalar-valued deterministic function
// against central finite differences on randomly probed elements. The
// per-element differences are normalized by the largest gradient magnitude
// seen across the probes, so near-zero components do not inflate the error.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h, double tol, int probes, Rng& rng);

}  // namespace refkv

#endif
