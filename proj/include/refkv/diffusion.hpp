#ifndef REFKV_DIFFUSION_HPP
#define REFKV_DIFFUSION_HPP

#include <vector>

#include "refkv/ops.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

// beta/alpha tables for t = 1..T with the alpha_bar[0] = 1 convention.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;        // index 1..T, beta[0] unused
    std::vector<double> alpha;       // 1 - beta
    std::vector<double> alpha_bar;   // alpha_bar[0] = 1, cumulative product
    std::vector<double> sqrt_ab;     // sqrt(alpha_bar)
    std::vector<double> sqrt_1mab;   // sqrt(1 - alpha_bar)
};

struct GuidanceConfig {
    double scale = 1.5;
    double condition_dropout_prob = 0.1;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise; t = 0 returns z0.
Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched);
// per-item timesteps for a batched z0
Tensor q_sample_batch(const Tensor& z0, const std::vector<int>& t, const Tensor& noise,
                      const NoiseSchedule& sched);

// eps_hat = (z_t - sqrt(alpha_bar_t) z0_hat) / sqrt(1 - alpha_bar_t)
Tensor predict_eps_from_z0(const Tensor& z_t, const Tensor& z0_hat, int t,
                           const NoiseSchedule& sched);

// deterministic (eta = 0) step from t to t_prev using the z0 prediction
Tensor ddim_step(const Tensor& z_t, const Tensor& z0_hat, int t, int t_prev,
                 const NoiseSchedule& sched);

// eps_guided = eps_uncond + s (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s);

// descending timestep grid T = ts[0] > ts[1] > ... > ts.back() = 0
std::vector<int> ddim_timesteps(int T, int steps);

}  // namespace refkv

#endif
