#include "refkv/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace refkv {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(size_t(T) + 1, 0.0);
    s.alpha.assign(size_t(T) + 1, 1.0);
    s.alpha_bar.assign(size_t(T) + 1, 1.0);
    s.sqrt_ab.assign(size_t(T) + 1, 1.0);
    s.sqrt_1mab.assign(size_t(T) + 1, 0.0);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = (T == 1) ? 0.0 : double(t - 1) / double(T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[size_t(t)] = b;
        s.alpha[size_t(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[size_t(t)] = prod;
        s.sqrt_ab[size_t(t)] = std::sqrt(prod);
        s.sqrt_1mab[size_t(t)] = std::sqrt(1.0 - prod);
    }
    return s;
}

namespace {
void check_t(int t, const NoiseSchedule& sched, int lo, const char* op) {
    if (t < lo || t > sched.T)
        throw std::invalid_argument(std::string(op) + ": timestep " + std::to_string(t) +
                                    " outside [" + std::to_string(lo) + "," +
                                    std::to_string(sched.T) + "]");
}
}  // namespace

Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched) {
    check_t(t, sched, 0, "q_sample");
    if (!z0.same_shape(noise))
        tensor_error("q_sample: noise shape " + shape_str(noise.shape()) +
                     " differs from z0 shape " + shape_str(z0.shape()));
    return add(affine(z0, 0.0, sched.sqrt_ab[size_t(t)]),
               affine(noise, 0.0, sched.sqrt_1mab[size_t(t)]));
}

Tensor q_sample_batch(const Tensor& z0, const std::vector<int>& t, const Tensor& noise,
                      const NoiseSchedule& sched) {
    if (z0.dim(0) != int64_t(t.size()))
        tensor_error("q_sample_batch: one timestep per batch item required");
    if (!z0.same_shape(noise)) tensor_error("q_sample_batch: noise shape mismatch");
    std::vector<double> sa(t.size()), sn(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        check_t(t[i], sched, 0, "q_sample_batch");
        sa[i] = sched.sqrt_ab[size_t(t[i])];
        sn[i] = sched.sqrt_1mab[size_t(t[i])];
    }
    return add(scale_rows(z0, sa), scale_rows(noise, sn));
}

Tensor predict_eps_from_z0(const Tensor& z_t, const Tensor& z0_hat, int t,
                           const NoiseSchedule& sched) {
    check_t(t, sched, 1, "predict_eps_from_z0");
    if (sched.alpha_bar[size_t(t)] >= 1.0)
        throw std::invalid_argument("predict_eps_from_z0: alpha_bar at t must be < 1");
    if (!z_t.same_shape(z0_hat)) tensor_error("predict_eps_from_z0: shape mismatch");
    double inv = 1.0 / sched.sqrt_1mab[size_t(t)];
    return affine(sub(z_t, affine(z0_hat, 0.0, sched.sqrt_ab[size_t(t)])), 0.0, inv);
}

Tensor ddim_step(const Tensor& z_t, const Tensor& z0_hat, int t, int t_prev,
                 const NoiseSchedule& sched) {
    check_t(t, sched, 1, "ddim_step");
    check_t(t_prev, sched, 0, "ddim_step");
    if (t_prev >= t)
        throw std::invalid_argument("ddim_step: t_prev must be smaller than t");
    Tensor eps = predict_eps_from_z0(z_t, z0_hat, t, sched);
    return add(affine(z0_hat, 0.0, sched.sqrt_ab[size_t(t_prev)]),
               affine(eps, 0.0, sched.sqrt_1mab[size_t(t_prev)]));
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
    if (!eps_uncond.same_shape(eps_cond)) tensor_error("cfg_combine: shape mismatch");
    // single rounding per element; s = 1 reproduces the conditional branch
    // bitwise and s = 0 the unconditional one
    Tensor out = Tensor::zeros(eps_uncond.shape(),
                               grad_enabled() && (eps_uncond.requires_grad() ||
                                                  eps_cond.requires_grad()));
    const float* pu = eps_uncond.data();
    const float* pc = eps_cond.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        po[i] = float(double(pu[i]) + s * (double(pc[i]) - double(pu[i])));
    if (out.requires_grad()) {
        Tensor cu = eps_uncond, cc = eps_cond, co = out;
        tape().record([cu, cc, co, s]() mutable {
            const float* g = co.grad();
            if (cu.requires_grad()) {
                float* gu = cu.grad();
                for (int64_t i = 0; i < co.numel(); ++i) gu[i] += float((1.0 - s) * g[i]);
            }
            if (cc.requires_grad()) {
                float* gc = cc.grad();
                for (int64_t i = 0; i < co.numel(); ++i) gc[i] += float(s * g[i]);
            }
        });
    }
    return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1) throw std::invalid_argument("ddim_timesteps: steps must be >= 1");
    if (steps > T)
        throw std::invalid_argument("ddim_timesteps: steps " + std::to_string(steps) +
                                    " exceeds schedule length " + std::to_string(T));
    std::vector<int> ts;
    ts.reserve(size_t(steps) + 1);
    for (int k = steps; k >= 0; --k) {
        int t = int(std::llround(double(T) * double(k) / double(steps)));
        if (!ts.empty() && t >= ts.back()) continue;  // guard duplicate rounding
        ts.push_back(t);
    }
    return ts;
}

}  // namespace refkv
