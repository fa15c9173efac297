#ifndef REFKV_PIPELINE_HPP
#define REFKV_PIPELINE_HPP

#include <vector>

#include "refkv/codec.hpp"
#include "refkv/diffusion.hpp"
#include "refkv/identity.hpp"
#include "refkv/unet.hpp"

namespace refkv {

// Conditional and unconditional reference inputs for one guided sample. The
// unconditional branch carries zero-tensor reference latents (for cachekv: the
// memoized zero-latent cache replicated to the reference count).
struct PreparedConditions {
    KVCache cond_cache, uncond_cache;
    std::vector<Tensor> cond_refs, uncond_refs;
    RefInput cond, uncond;
    int ref_count = 0;
};

// ref_latents: one Cz×S×S (or 1×Cz×S×S) tensor per reference; may be empty
// for models that take no references
PreparedConditions prepare_conditions(UNet& model, const std::vector<Tensor>& ref_latents);

// DDIM loop from z_T ~ N(0,I): two model evaluations per step (reference
// conditions and zero-reference conditions) combined per the guidance scale.
Tensor sample(UNet& model, const NoiseSchedule& sched, const Tensor& z_lq,
              const PreparedConditions& cond, int steps, const GuidanceConfig& guidance,
              Rng& rng);

// verification variant: re-extracts the reference cache at every step
// (cachekv models only); must match sample() bitwise
Tensor sample_reextracting(UNet& model, const NoiseSchedule& sched, const Tensor& z_lq,
                           const std::vector<Tensor>& ref_latents, int steps,
                           const GuidanceConfig& guidance, Rng& rng);

struct TrainBatch {
    Tensor z0_star;                   // B×Cz×S×S clean latents
    Tensor z_lq;                      // B×Cz×S×S degraded-input latents
    std::vector<Tensor> ref_latents;  // R tensors of B×Cz×S×S
    Tensor x_star;                    // B×3×S×S clean images for the identity loss
};

struct TrainStepReport {
    double total = 0.0;
    double l_ldm = 0.0;
    double l_time_id = 0.0;  // scaled identity component before lambda
    std::vector<int> t;
    uint64_t ref_input_checksum = 0;  // reference latents after condition dropout
    int dropped_items = 0;
};

// samples t uniformly in [1,T] per item, forms z_t, applies condition dropout
// (zero-tensor references), predicts z0, computes the total loss, and
// backpropagates; the optimizer step is the caller's
TrainStepReport train_step(UNet& model, const LatentCodec& codec, const FaceEmbedder& embedder,
                           const TrainBatch& batch, const NoiseSchedule& sched,
                           const LossConfig& losses, const GuidanceConfig& guidance, Rng& rng);

// [0,1] image space <-> the codec's [-1,1] domain
Tensor to_codec_range(const Tensor& img01);
Tensor from_codec_range(const Tensor& img11);

// full restoration: encode LQ and references, guided sampling, decode;
// images in [0,1], output clamped to [0,1]
Tensor restore_image(UNet& model, const LatentCodec& codec, const NoiseSchedule& sched,
                     const Tensor& lq01, const std::vector<Tensor>& refs01, int steps,
                     const GuidanceConfig& guidance, Rng& rng);

}  // namespace refkv

#endif
