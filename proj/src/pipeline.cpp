#include "refkv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refkv/autodiff.hpp"

namespace refkv {

namespace {

Tensor as_batched(const Tensor& t) {
    if (t.rank() == 3) return reshape_copy(t, {1, t.dim(0), t.dim(1), t.dim(2)});
    return t;
}

uint64_t combine_checksums(uint64_t h, uint64_t c) {
    for (int i = 0; i < 8; ++i) {
        h ^= (c >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

PreparedConditions prepare_conditions(UNet& model, const std::vector<Tensor>& ref_latents) {
    PreparedConditions pc;
    pc.ref_count = int(ref_latents.size());
    for (const Tensor& r : ref_latents) pc.cond_refs.push_back(as_batched(r));

    switch (model.config().mechanism) {
        case Mechanism::cachekv: {
            if (pc.cond_refs.empty())
                throw std::invalid_argument("prepare_conditions: cachekv needs references");
            NoGradGuard ng;
            pc.cond_cache = model.extract_cachekv_batch(pc.cond_refs);
            pc.uncond_cache = model.uncond_cache(pc.ref_count);
            pc.cond.cache = &pc.cond_cache;
            pc.uncond.cache = &pc.uncond_cache;
            break;
        }
        case Mechanism::channel_concat:
        case Mechanism::spatial_concat:
        case Mechanism::cross_attention: {
            for (const Tensor& r : pc.cond_refs)
                pc.uncond_refs.push_back(Tensor::zeros(r.shape()));
            if (model.config().mechanism == Mechanism::cross_attention && pc.cond_refs.empty())
                throw std::invalid_argument("prepare_conditions: cross-attention needs references");
            pc.cond.ref_latents = pc.cond_refs;
            pc.uncond.ref_latents = pc.uncond_refs;
            break;
        }
    }
    return pc;
}

Tensor sample(UNet& model, const NoiseSchedule& sched, const Tensor& z_lq,
              const PreparedConditions& cond, int steps, const GuidanceConfig& guidance,
              Rng& rng) {
    NoGradGuard ng;
    Tensor lq = as_batched(z_lq);
    std::vector<int> ts = ddim_timesteps(sched.T, steps);
    Tensor z = Tensor::randn(lq.shape(), rng);
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        int t = ts[i], t_prev = ts[i + 1];
        Tensor z0_c = model.forward(z, lq, {t}, cond.cond);
        Tensor z0_u = model.forward(z, lq, {t}, cond.uncond);
        // the z0 and eps parameterizations are affine images of each other,
        // so Eq.-5 guidance applies identically to the z0 estimates
        Tensor z0_g = cfg_combine(z0_u, z0_c, guidance.scale);
        z = (t_prev == 0) ? z0_g : ddim_step(z, z0_g, t, t_prev, sched);
    }
    return z;
}

Tensor sample_reextracting(UNet& model, const NoiseSchedule& sched, const Tensor& z_lq,
                           const std::vector<Tensor>& ref_latents, int steps,
                           const GuidanceConfig& guidance, Rng& rng) {
    if (model.config().mechanism != Mechanism::cachekv)
        throw std::invalid_argument("sample_reextracting: cachekv models only");
    NoGradGuard ng;
    Tensor lq = as_batched(z_lq);
    std::vector<Tensor> refs;
    for (const Tensor& r : ref_latents) refs.push_back(as_batched(r));
    std::vector<int> ts = ddim_timesteps(sched.T, steps);
    Tensor z = Tensor::randn(lq.shape(), rng);
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        int t = ts[i], t_prev = ts[i + 1];
        KVCache cache = model.extract_cachekv_batch(refs);  // fresh every step
        KVCache uncond = model.uncond_cache(int(refs.size()));
        RefInput rc, ru;
        rc.cache = &cache;
        ru.cache = &uncond;
        Tensor z0_c = model.forward(z, lq, {t}, rc);
        Tensor z0_u = model.forward(z, lq, {t}, ru);
        Tensor z0_g = cfg_combine(z0_u, z0_c, guidance.scale);
        z = (t_prev == 0) ? z0_g : ddim_step(z, z0_g, t, t_prev, sched);
    }
    return z;
}

TrainStepReport train_step(UNet& model, const LatentCodec& codec, const FaceEmbedder& embedder,
                           const TrainBatch& batch, const NoiseSchedule& sched,
                           const LossConfig& losses, const GuidanceConfig& guidance, Rng& rng) {
    if (!batch.z0_star.defined() || batch.z0_star.numel() == 0 || batch.z0_star.dim(0) == 0)
        throw std::invalid_argument("train_step: empty batch");
    int64_t B = batch.z0_star.dim(0);
    if (!batch.z0_star.same_shape(batch.z_lq))
        tensor_error("train_step: z_LQ and z0 shapes disagree");

    TrainStepReport rep;
    rep.t.resize(size_t(B));
    for (int64_t b = 0; b < B; ++b) rep.t[size_t(b)] = int(rng.uniform_int(1, sched.T));

    Tensor noise = Tensor::randn(batch.z0_star.shape(), rng);
    Tensor z_t = q_sample_batch(batch.z0_star, rep.t, noise, sched);

    // condition dropout: per-item zero-tensor references
    std::vector<bool> drop(size_t(B), false);
    if (!batch.ref_latents.empty()) {
        for (int64_t b = 0; b < B; ++b) {
            drop[size_t(b)] = rng.bernoulli(guidance.condition_dropout_prob);
            if (drop[size_t(b)]) ++rep.dropped_items;
        }
    }
    std::vector<Tensor> refs;
    uint64_t src = 1469598103934665603ull;
    for (const Tensor& r : batch.ref_latents) {
        Tensor rr = r;
        if (rep.dropped_items > 0) {
            rr = r.clone();
            rr.set_requires_grad(false);
            for (int64_t b = 0; b < B; ++b)
                if (drop[size_t(b)]) {
                    int64_t stride = rr.numel() / B;
                    std::fill(rr.data() + b * stride, rr.data() + (b + 1) * stride, 0.0f);
                }
        }
        src = combine_checksums(src, rr.checksum());
        refs.push_back(rr);
    }
    rep.ref_input_checksum = src;

    RefInput ref;
    KVCache cache;
    if (model.config().mechanism == Mechanism::cachekv) {
        cache = model.extract_cachekv_batch(refs);
        ref.cache = &cache;
    } else {
        ref.ref_latents = refs;
    }

    Tensor z0_hat = model.forward(z_t, batch.z_lq, rep.t, ref);
    Tensor x_hat = from_codec_range(codec.decode(z0_hat));
    auto loss = total_loss_batch(z0_hat, batch.z0_star, x_hat, batch.x_star, rep.t, sched,
                                 losses, embedder);
    rep.total = loss.total.precise_item();
    rep.l_ldm = loss.l_ldm;
    rep.l_time_id = loss.l_time_id;
    backward(loss.total);
    return rep;
}

Tensor to_codec_range(const Tensor& img01) { return affine(img01, -1.0, 2.0); }
Tensor from_codec_range(const Tensor& img11) { return affine(img11, 0.5, 0.5); }

Tensor restore_image(UNet& model, const LatentCodec& codec, const NoiseSchedule& sched,
                     const Tensor& lq01, const std::vector<Tensor>& refs01, int steps,
                     const GuidanceConfig& guidance, Rng& rng) {
    NoGradGuard ng;
    Tensor z_lq = codec.encode(to_codec_range(as_batched(lq01)));
    std::vector<Tensor> ref_latents;
    for (const Tensor& r : refs01)
        ref_latents.push_back(codec.encode(to_codec_range(as_batched(r))));
    PreparedConditions pc = prepare_conditions(model, ref_latents);
    Tensor z0 = sample(model, sched, z_lq, pc, steps, guidance, rng);
    Tensor img = from_codec_range(codec.decode(z0));
    Tensor out = Tensor::zeros({img.dim(1), img.dim(2), img.dim(3)});
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = std::clamp(img.data()[i], 0.0f, 1.0f);
    return out;
}

}  // namespace refkv
