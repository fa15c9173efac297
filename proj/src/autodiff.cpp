#include "refkv/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace refkv {

namespace {
thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;
}  // namespace

Tape& tape() { return g_tape; }
bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool b) { g_grad_enabled = b; }

void Tape::run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        tensor_error("backward() requires a scalar loss");
    Tensor l = loss;
    l.grad()[0] += 1.0f;
    g_tape.run_backward();
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h, double tol, int probes, Rng& rng) {
    GradCheckReport report;

    // two clean forward passes must agree bitwise, otherwise f is not
    // deterministic and finite differences are meaningless
    {
        NoGradGuard ng;
        Tensor y1 = f(x);
        Tensor y2 = f(x);
        if (y1.numel() != 1 || y2.numel() != 1)
            tensor_error("grad_check: f must be scalar-valued");
        if (std::memcmp(y1.data(), y2.data(), 4) != 0)
            throw std::runtime_error("grad_check: f is not deterministic");
    }

    x.set_requires_grad(true);
    x.zero_grad();
    size_t tape_before = tape().size();
    Tensor y = f(x);
    backward(y);
    (void)tape_before;
    std::vector<float> analytic(x.grad(), x.grad() + x.numel());
    x.set_requires_grad(false);

    int64_t n = x.numel();
    int total = probes < n ? probes : int(n);
    NoGradGuard ng;
    std::vector<double> diffs(size_t(total), 0.0);
    double scale = 1e-6;  // differences are normalized by the gradient scale
    for (int p = 0; p < total; ++p) {
        int64_t idx = (probes < n) ? int64_t(rng.next_u64() % uint64_t(n)) : p;
        float saved = x.data()[idx];
        float up = float(double(saved) + h), down = float(double(saved) - h);
        x.data()[idx] = up;
        double fp = f(x).precise_item();
        x.data()[idx] = down;
        double fm = f(x).precise_item();
        x.data()[idx] = saved;
        // divide by the step the f32 input actually took
        double numeric = (fp - fm) / (double(up) - double(down));
        double a = analytic[size_t(idx)];
        diffs[size_t(p)] = std::fabs(a - numeric);
        scale = std::max({scale, std::fabs(a), std::fabs(numeric)});
    }
    double max_rel = 0.0;
    for (double d : diffs) max_rel = std::max(max_rel, d / scale);
    report.pass = max_rel < tol;
    report.max_rel_err = max_rel;
    report.probes = total;
    return report;
}

}  // namespace refkv
