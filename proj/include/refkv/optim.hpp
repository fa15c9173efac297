#ifndef REFKV_OPTIM_HPP
#define REFKV_OPTIM_HPP

#include <string>
#include <vector>

#include "refkv/tensor.hpp"

namespace refkv {

// Adam with bias correction. State ordering follows the parameter list, so a
// checkpointed run resumes exactly.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    int64_t step_count() const { return t_; }

    // flat state blob (m then v per parameter, plus the step counter)
    std::vector<float> state_blob() const;
    void load_state_blob(const std::vector<float>& blob);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace refkv

#endif
