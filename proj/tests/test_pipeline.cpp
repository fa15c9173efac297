#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "refkv/optim.hpp"
#include "refkv/pipeline.hpp"

using namespace refkv;
using oracles::max_abs_diff;
using oracles::rand_tensor;

namespace {

struct Fixture {
    UNet model;
    LatentCodec codec;
    FaceEmbedder embedder;
    NoiseSchedule sched;

    explicit Fixture(Mechanism m, uint64_t seed = 3) {
        Rng rng(seed);
        model = build_model(desk_unet_config(m), rng);
        codec = make_orthogonal_codec(CodecConfig{});
        embedder = make_face_embedder();
        sched = make_schedule(64, 1e-4, 2e-2);
    }
};

std::vector<Tensor> latents(int n, Rng& rng) {
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) out.push_back(rand_tensor({1, 4, 8, 8}, rng));
    return out;
}

}  // namespace

TEST_CASE("guided sampling at s=1 equals conditional-only sampling") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(5);
    Tensor z_lq = rand_tensor({1, 4, 8, 8}, rng);
    auto refs = latents(3, rng);
    PreparedConditions pc = prepare_conditions(fx.model, refs);

    GuidanceConfig g;
    g.scale = 1.0;
    Rng sr1(99);
    Tensor guided = sample(fx.model, fx.sched, z_lq, pc, 8, g, sr1);

    // conditional-only loop with the same start noise
    Rng sr2(99);
    Tensor z = Tensor::randn({1, 4, 8, 8}, sr2);
    std::vector<int> ts = ddim_timesteps(64, 8);
    NoGradGuard ng;
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        Tensor z0_c = fx.model.forward(z, z_lq, {ts[i]}, pc.cond);
        // the unconditional branch is still evaluated, as in the sampler
        Tensor z0_u = fx.model.forward(z, z_lq, {ts[i]}, pc.uncond);
        (void)z0_u;
        z = (ts[i + 1] == 0) ? z0_c : ddim_step(z, z0_c, ts[i], ts[i + 1], fx.sched);
    }
    CHECK(max_abs_diff(guided, z) < 1e-5);
}

TEST_CASE("sampling is deterministic under a fixed seed") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(6);
    Tensor z_lq = rand_tensor({1, 4, 8, 8}, rng);
    auto refs = latents(2, rng);
    PreparedConditions pc = prepare_conditions(fx.model, refs);
    GuidanceConfig g;
    Rng a(7), b(7), c(8);
    CHECK(sample(fx.model, fx.sched, z_lq, pc, 6, g, a).checksum() ==
          sample(fx.model, fx.sched, z_lq, pc, 6, g, b).checksum());
    CHECK(sample(fx.model, fx.sched, z_lq, pc, 6, g, a).checksum() !=
          sample(fx.model, fx.sched, z_lq, pc, 6, g, c).checksum());
}

TEST_CASE("once-extracted cache sampling equals per-step re-extraction bitwise") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(7);
    Tensor z_lq = rand_tensor({1, 4, 8, 8}, rng);
    auto refs = latents(3, rng);
    GuidanceConfig g;  // s = 1.5

    PreparedConditions pc = prepare_conditions(fx.model, refs);
    Rng s1(11), s2(11);
    Tensor once = sample(fx.model, fx.sched, z_lq, pc, 10, g, s1);
    Tensor redo = sample_reextracting(fx.model, fx.sched, z_lq, refs, 10, g, s2);
    CHECK(once.checksum() == redo.checksum());
}

TEST_CASE("pass-count accounting for a guided cachekv sample") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(8);
    Tensor z_lq = rand_tensor({1, 4, 8, 8}, rng);
    auto refs = latents(5, rng);
    fx.model.uncond_cache(5);  // warm the memoized zero-reference cache
    fx.model.counters().reset();
    PreparedConditions pc = prepare_conditions(fx.model, refs);
    GuidanceConfig g;
    Rng sr(9);
    sample(fx.model, fx.sched, z_lq, pc, 10, g, sr);
    // N_ref extraction passes plus two per step
    CHECK(fx.model.counters().unet_passes == 5 + 2 * 10);
    CHECK(fx.model.counters().extract_passes == 5);
}

TEST_CASE("train_step with lambda 0 reduces to the L1 latent loss") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(9);
    TrainBatch batch;
    batch.z0_star = rand_tensor({2, 4, 8, 8}, rng);
    batch.z_lq = rand_tensor({2, 4, 8, 8}, rng);
    batch.ref_latents = {rand_tensor({2, 4, 8, 8}, rng), rand_tensor({2, 4, 8, 8}, rng)};
    batch.x_star = rand_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);

    fx.model.set_trainable(true);
    LossConfig losses;
    losses.lambda_time_id = 0.0;
    GuidanceConfig g;
    Rng tr(21);
    auto rep = train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr);
    CHECK(rep.total == doctest::Approx(rep.l_ldm).epsilon(1e-12));

    losses.lambda_time_id = 0.1;
    Rng tr2(21);
    for (auto& [n, t] : fx.model.params()) t.zero_grad();
    auto rep2 = train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr2);
    CHECK(rep2.total == doctest::Approx(rep2.l_ldm + 0.1 * rep2.l_time_id).epsilon(1e-9));
}

TEST_CASE("dropout probability one trains on zero-tensor references") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(10);
    TrainBatch batch;
    batch.z0_star = rand_tensor({2, 4, 8, 8}, rng);
    batch.z_lq = rand_tensor({2, 4, 8, 8}, rng);
    batch.ref_latents = {rand_tensor({2, 4, 8, 8}, rng)};
    batch.x_star = rand_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);

    fx.model.set_trainable(true);
    LossConfig losses;
    GuidanceConfig g;
    g.condition_dropout_prob = 1.0;
    Rng tr(3);
    auto rep = train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr);
    CHECK(rep.dropped_items == 2);

    // the extraction input checksum equals the zero-latent checksum
    uint64_t want = 1469598103934665603ull;
    uint64_t zc = Tensor::zeros({2, 4, 8, 8}).checksum();
    for (int i = 0; i < 8; ++i) {
        want ^= (zc >> (8 * i)) & 0xff;
        want *= 1099511628211ull;
    }
    CHECK(rep.ref_input_checksum == want);
}

TEST_CASE("train_step rejects an empty batch") {
    Fixture fx(Mechanism::cachekv);
    TrainBatch batch;
    LossConfig losses;
    GuidanceConfig g;
    Rng tr(3);
    CHECK_THROWS_AS(train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr),
                    std::invalid_argument);
}

TEST_CASE("train_step fills parameter gradients") {
    Fixture fx(Mechanism::cachekv);
    Rng rng(11);
    TrainBatch batch;
    batch.z0_star = rand_tensor({1, 4, 8, 8}, rng);
    batch.z_lq = rand_tensor({1, 4, 8, 8}, rng);
    batch.ref_latents = {rand_tensor({1, 4, 8, 8}, rng)};
    batch.x_star = rand_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    fx.model.set_trainable(true);
    LossConfig losses;
    GuidanceConfig g;
    g.condition_dropout_prob = 0.0;
    Rng tr(5);
    train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr);
    double gsum = 0.0;
    for (auto& [name, t] : fx.model.params())
        if (t.has_grad())
            for (int64_t i = 0; i < t.numel(); ++i) gsum += std::fabs(t.grad()[i]);
    CHECK(gsum > 0.0);

    // the frozen codec is untouched by the training step
    CHECK(fx.codec.frozen());
}

TEST_CASE("restore_image runs end to end for every mechanism") {
    Rng rng(12);
    Tensor lq = rand_tensor({3, 32, 32}, rng, 0.0, 1.0);
    std::vector<Tensor> refs = {rand_tensor({3, 32, 32}, rng, 0.0, 1.0),
                                rand_tensor({3, 32, 32}, rng, 0.0, 1.0)};
    for (Mechanism m : {Mechanism::channel_concat, Mechanism::cross_attention,
                        Mechanism::spatial_concat, Mechanism::cachekv}) {
        Fixture fx(m);
        GuidanceConfig g;
        Rng sr(13);
        Tensor out = restore_image(fx.model, fx.codec, fx.sched, lq, refs, 4, g, sr);
        CHECK(out.shape() == std::vector<int64_t>{3, 32, 32});
        for (int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] >= 0.0f);
            CHECK(out.data()[i] <= 1.0f);
        }
    }
}

TEST_CASE("frozen codec checksum is constant across a short training run") {
    Fixture fx(Mechanism::cachekv);
    uint64_t before = fx.codec.checksum();
    Rng rng(14);
    fx.model.set_trainable(true);
    std::vector<Tensor> trainable;
    for (auto& [n, t] : fx.model.params()) trainable.push_back(t);
    Adam opt(trainable, 1e-3);
    LossConfig losses;
    GuidanceConfig g;
    Rng tr(15);
    for (int step = 0; step < 3; ++step) {
        TrainBatch batch;
        batch.z0_star = rand_tensor({1, 4, 8, 8}, rng);
        batch.z_lq = rand_tensor({1, 4, 8, 8}, rng);
        batch.ref_latents = {rand_tensor({1, 4, 8, 8}, rng)};
        batch.x_star = rand_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
        opt.zero_grad();
        train_step(fx.model, fx.codec, fx.embedder, batch, fx.sched, losses, g, tr);
        opt.step();
        fx.model.invalidate_uncond_cache();
    }
    CHECK(fx.codec.checksum() == before);
}
