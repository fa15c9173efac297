#ifndef REFKV_UNET_HPP
#define REFKV_UNET_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "refkv/ops.hpp"
#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

enum class Mechanism { channel_concat, cross_attention, spatial_concat, cachekv };

Mechanism mechanism_from_string(const std::string& s);
std::string to_string(Mechanism m);

struct UNetConfig {
    int in_channels = 8;    // 2·Cz: z_t plus the channel-concatenated z_LQ
    int out_channels = 4;   // Cz
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2};
    int num_res_blocks = 1;
    std::vector<int> attention_resolutions = {4};
    int timestep_embed_dim = 64;
    Mechanism mechanism = Mechanism::cachekv;
    int num_heads = 1;
    int max_refs = 5;       // channel-concat slot count; cachekv extraction cap
    int latent_size = 8;
    int norm_groups = 8;
};

// the paper-scale hyperparameters, kept as a constructable preset
UNetConfig paper_unet_config();
UNetConfig desk_unet_config(Mechanism m);

// per-self-attention-layer key/value token blocks from reference latents
struct KVEntry {
    Tensor k;  // B×(refs·T_layer)×D_layer
    Tensor v;
};

struct KVCache {
    std::vector<KVEntry> layers;
    int ref_count = 0;
    uint64_t source_checksum = 0;
    // token blocks repeated n times (all-zero reference latents produce
    // identical blocks, so the unconditional cache is one pass + replication)
    KVCache replicated(int n) const;
};

struct Counters {
    int64_t unet_passes = 0;
    int64_t extract_passes = 0;               // subset of unet_passes
    int64_t attention_token_units = 0;        // query tokens, main passes
    int64_t attention_token_units_extract = 0;
    double flops_estimate = 0.0;
    void reset() { *this = Counters{}; }
    std::string report() const;
};

// reference-side input; exactly one field populated, per mechanism
struct RefInput {
    const KVCache* cache = nullptr;    // cachekv
    std::vector<Tensor> ref_latents;   // one B×Cz×S×S tensor per reference
};

class UNet {
public:
    UNet() = default;

    const UNetConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    int64_t param_count() const;
    uint64_t checksum() const;
    int attention_layer_count() const { return n_attn_layers_; }
    int attention_channels(int layer_id) const;

    std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    void set_trainable(bool on);

    Counters& counters() { return counters_; }

    // channel-concatenates [z_t ; z_LQ], applies the mechanism at every
    // attention layer, returns the z0 estimate; one timestep per batch item
    Tensor forward(const Tensor& z_t, const Tensor& z_lq, const std::vector<int>& t,
                   const RefInput& ref);

    // one U-net pass per reference latent (Cz×S×S each) with t = 0 and a
    // zero tensor in the LQ channel slot; the z0 output is discarded
    KVCache extract_cachekv(const std::vector<Tensor>& ref_latents);
    // batched training-path variant: one pass per reference, each B×Cz×S×S
    KVCache extract_cachekv_batch(const std::vector<Tensor>& refs);
    // drop the memoized unconditional cache (weights changed)
    void invalidate_uncond_cache() { uncond_single_.reset(); }

    // memoized cache extracted from a single zero reference latent,
    // replicated to ref_count token blocks (the classifier-free-guidance
    // unconditional branch)
    KVCache uncond_cache(int ref_count);

    // Q/K/V from main tokens, cached K/V appended on the token axis, then
    // scaled dot attention; queries never come from cached tokens. This is
    // the exact routine the forward pass uses at each attention layer.
    Tensor attend_with_cache(int layer_id, const Tensor& main_tokens,
                             const KVEntry* cache_entry) const;

    void save(const std::string& dir, int64_t step,
              const std::vector<std::pair<std::string, std::string>>& extra = {}) const;
    static UNet load(const std::string& dir);
    static int64_t load_step(const std::string& dir);

    friend UNet build_model(const UNetConfig& cfg, Rng& rng);

private:
    struct ResBlock {
        int in_ch = 0, out_ch = 0;
        Tensor gn1_g, gn1_b, conv1_w, conv1_b;
        Tensor temb_w1, temb_b1, temb_w2, temb_b2;
        Tensor gn2_g, gn2_b, conv2_w, conv2_b;
        Tensor skip_w, skip_b;  // 1×1 projection when in_ch != out_ch
    };
    struct AttnLayer {
        int layer_id = -1;
        int channels = 0;
        Tensor gn_g, gn_b, wq, bq, wk, bk, wv, bv, wo, bo;
        // cross-attention addon, reading encoder-space reference latents
        Tensor xgn_g, xgn_b, xwq, xbq, xwk, xwv, xwo, xbo;
    };
    struct Level {
        std::vector<ResBlock> blocks;
        std::vector<int> attn;     // index into attn_layers_ after each block, -1 if none
        Tensor down_w, down_b;     // stride-2 conv between levels
        Tensor up_w, up_b;         // 3×3 conv after nearest upsample
        std::vector<ResBlock> up_blocks;
        std::vector<int> up_attn;
    };

    struct ForwardCtx {
        const KVCache* cache = nullptr;
        KVCache* record = nullptr;
        Tensor ref_tokens;  // cross-attention K/V source, B×(R·T)×Cz
        bool extract = false;
        // spatial-concat: tiles ride the batch axis and meet only inside
        // attention, so convolutions cannot leak across tile borders
        int spatial_tiles = 1;
    };

    Tensor run(const Tensor& input, const std::vector<int>& t, ForwardCtx& ctx);
    Tensor res_forward(const ResBlock& rb, const Tensor& x, const Tensor& temb);
    Tensor attn_forward(const AttnLayer& al, const Tensor& x, ForwardCtx& ctx);
    Tensor time_embedding(const std::vector<int>& t) const;
    void validate_ref_input(const RefInput& ref, int64_t batch) const;
    Tensor assemble_ref_latents(const RefInput& ref, int64_t batch) const;

    UNetConfig cfg_;
    uint64_t seed_ = 0;
    std::vector<std::pair<std::string, Tensor>> params_;
    Tensor conv_in_w, conv_in_b, out_gn_g, out_gn_b, conv_out_w, conv_out_b;
    std::vector<Level> levels_;
    ResBlock mid1_, mid2_;
    int mid_attn_ = -1;
    std::vector<AttnLayer> attn_layers_;
    int n_attn_layers_ = 0;
    Counters counters_;
    std::optional<KVCache> uncond_single_;
};

// seeded scaled-normal initialization: N(0, 1/sqrt(fan_in)), the final
// output conv damped by 0.1, biases zero, norm scales one
UNet build_model(const UNetConfig& cfg, Rng& rng);

}  // namespace refkv

#endif
