#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "refkv/diffusion.hpp"

using namespace refkv;
using oracles::max_abs_diff;
using oracles::rand_tensor;

TEST_CASE("schedule tables match the direct 64-bit product oracle") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
    double prod = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        double beta = 1e-4 + (2e-2 - 1e-4) * double(t - 1) / 999.0;
        prod *= 1.0 - beta;
    }
    CHECK(std::fabs(s.alpha_bar[1000] - prod) < 1e-9);
    CHECK(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.alpha_bar[size_t(t)] < s.alpha_bar[size_t(t - 1)]);
        CHECK(s.beta[size_t(t)] > 0.0);
        CHECK(s.beta[size_t(t)] < 1.0);
        double resum = s.sqrt_ab[size_t(t)] * s.sqrt_ab[size_t(t)] +
                       (1.0 - s.alpha_bar[size_t(t)]);
        CHECK(std::fabs(resum - 1.0) < 1e-6);
    }
}

TEST_CASE("schedule rejects bad arguments") {
    CHECK_THROWS_AS(make_schedule(0, 1e-4, 2e-2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 2e-2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.5, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample endpoints") {
    Rng rng(9);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor z0 = rand_tensor({1, 4, 8, 8}, rng);
    Tensor noise = rand_tensor({1, 4, 8, 8}, rng);

    // t = 0 convention: alpha_bar = 1 exactly, z_t = z0
    CHECK(max_abs_diff(q_sample(z0, 0, noise, s), z0) == 0.0);

    // zero noise leaves only the Eq. 2 mean
    Tensor zt = q_sample(z0, 17, Tensor::zeros(z0.shape()), s);
    for (int64_t i = 0; i < z0.numel(); ++i)
        CHECK(zt.data()[i] == doctest::Approx(float(s.sqrt_ab[17] * z0.data()[i])));

    CHECK_THROWS_AS(q_sample(z0, -1, noise, s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(z0, 65, noise, s), std::invalid_argument);
}

TEST_CASE("q_sample Monte-Carlo statistics match Eq. 2 marginals") {
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Rng rng(123);
    Tensor z0 = rand_tensor({1, 2, 2, 2}, rng);
    const int N = 10000;
    for (int t : {16, 32, 64}) {
        std::vector<double> mean(size_t(z0.numel()), 0.0), m2(size_t(z0.numel()), 0.0);
        for (int i = 0; i < N; ++i) {
            Tensor noise = Tensor::randn(z0.shape(), rng);
            Tensor zt = q_sample(z0, t, noise, s);
            for (int64_t j = 0; j < z0.numel(); ++j) {
                mean[size_t(j)] += zt.data()[j];
                m2[size_t(j)] += double(zt.data()[j]) * zt.data()[j];
            }
        }
        double sigma = s.sqrt_1mab[size_t(t)];
        for (int64_t j = 0; j < z0.numel(); ++j) {
            double m = mean[size_t(j)] / N;
            double want_mean = s.sqrt_ab[size_t(t)] * z0.data()[j];
            CHECK(std::fabs(m - want_mean) < 3.0 * sigma / std::sqrt(double(N)));
            double var = m2[size_t(j)] / N - m * m;
            double want_var = 1.0 - s.alpha_bar[size_t(t)];
            CHECK(std::fabs(var - want_var) < 0.05 * want_var);
        }
    }
}

TEST_CASE("predict_eps recovers the injected noise for every t") {
    Rng rng(21);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor z0 = rand_tensor({1, 4, 4, 4}, rng);
    for (int t = 1; t <= 64; ++t) {
        Tensor noise = Tensor::randn(z0.shape(), rng);
        Tensor zt = q_sample(z0, t, noise, s);
        Tensor eps = predict_eps_from_z0(zt, z0, t, s);
        CHECK(max_abs_diff(eps, noise) < 1e-5);
    }
}

TEST_CASE("predict_eps edge cases") {
    Rng rng(22);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor zt = rand_tensor({1, 2, 4, 4}, rng);

    // z0_hat = z_t / sqrt(alpha_bar) makes eps exactly zero
    int t = 20;
    Tensor z0_hat = Tensor::zeros(zt.shape());
    for (int64_t i = 0; i < zt.numel(); ++i)
        z0_hat.data()[i] = float(zt.data()[i] / s.sqrt_ab[size_t(t)]);
    Tensor eps = predict_eps_from_z0(zt, z0_hat, t, s);
    for (int64_t i = 0; i < eps.numel(); ++i)
        CHECK(std::fabs(eps.data()[i]) < 1e-5);

    CHECK_THROWS_AS(predict_eps_from_z0(zt, z0_hat, 0, s), std::invalid_argument);
}

TEST_CASE("predict_eps is affine in the z0 estimate") {
    Rng rng(23);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor zt = rand_tensor({1, 2, 4, 4}, rng);
    Tensor a = rand_tensor({1, 2, 4, 4}, rng);
    Tensor b = rand_tensor({1, 2, 4, 4}, rng);
    double alpha = 0.3;
    int t = 40;
    Tensor mixed = add(affine(a, 0.0, alpha), affine(b, 0.0, 1.0 - alpha));
    Tensor lhs = predict_eps_from_z0(zt, mixed, t, s);
    Tensor rhs = add(affine(predict_eps_from_z0(zt, a, t, s), 0.0, alpha),
                     affine(predict_eps_from_z0(zt, b, t, s), 0.0, 1.0 - alpha));
    CHECK(max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("ddim with a perfect stub denoiser telescopes back to z0") {
    Rng rng(31);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor z0 = rand_tensor({1, 4, 8, 8}, rng);
    for (int steps : {1, 4, 16, 64}) {
        std::vector<int> ts = ddim_timesteps(64, steps);
        Tensor noise = Tensor::randn(z0.shape(), rng);
        Tensor z = q_sample(z0, ts[0], noise, s);
        for (size_t i = 0; i + 1 < ts.size(); ++i)
            z = ddim_step(z, z0, ts[i], ts[i + 1], s);
        CHECK(max_abs_diff(z, z0) < 1e-4);
    }
}

TEST_CASE("ddim_step at t_prev = 0 returns the z0 estimate") {
    Rng rng(32);
    NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
    Tensor zt = rand_tensor({1, 2, 4, 4}, rng);
    Tensor z0_hat = rand_tensor({1, 2, 4, 4}, rng);
    Tensor out = ddim_step(zt, z0_hat, 5, 0, s);
    CHECK(max_abs_diff(out, z0_hat) < 1e-7);
    CHECK_THROWS_AS(ddim_step(zt, z0_hat, 5, 5, s), std::invalid_argument);
}

TEST_CASE("ddim trajectory is deterministic") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        NoiseSchedule s = make_schedule(64, 1e-4, 2e-2);
        Tensor z0 = Tensor::randn({1, 4, 8, 8}, rng);
        Tensor z = Tensor::randn({1, 4, 8, 8}, rng);
        std::vector<int> ts = ddim_timesteps(64, 8);
        for (size_t i = 0; i + 1 < ts.size(); ++i) {
            // stub model: z0_hat = 0.9 z (affine function of the state)
            Tensor z0_hat = affine(z, 0.0, 0.9);
            z = ddim_step(z, z0_hat, ts[i], ts[i + 1], s);
        }
        return z.checksum();
    };
    CHECK(run(5) == run(5));
}

TEST_CASE("cfg_combine algebra") {
    Rng rng(41);
    Tensor eu = rand_tensor({1, 4, 8, 8}, rng);
    Tensor ec = rand_tensor({1, 4, 8, 8}, rng);
    CHECK(max_abs_diff(cfg_combine(eu, ec, 1.0), ec) < 1e-6);
    CHECK(max_abs_diff(cfg_combine(eu, ec, 0.0), eu) == 0.0);

    Tensor z = Tensor::zeros({1});
    Tensor two = Tensor::from({1}, {2.0f});
    CHECK(cfg_combine(z, two, 1.5).item() == doctest::Approx(3.0f));

    // affine in s: slope is (ec - eu) pointwise
    Tensor at1 = cfg_combine(eu, ec, 1.0);
    Tensor at3 = cfg_combine(eu, ec, 3.0);
    for (int64_t i = 0; i < eu.numel(); ++i) {
        double slope = (double(at3.data()[i]) - at1.data()[i]) / 2.0;
        CHECK(std::fabs(slope - (double(ec.data()[i]) - eu.data()[i])) < 1e-6);
    }
}

TEST_CASE("ddim_timesteps grid is strictly decreasing from T to 0") {
    for (int T : {64, 1000})
        for (int steps : {1, 10, 37, T}) {
            std::vector<int> ts = ddim_timesteps(T, steps);
            CHECK(ts.front() == T);
            CHECK(ts.back() == 0);
            for (size_t i = 0; i + 1 < ts.size(); ++i) CHECK(ts[i] > ts[i + 1]);
        }
    CHECK_THROWS_AS(ddim_timesteps(64, 65), std::invalid_argument);
}
