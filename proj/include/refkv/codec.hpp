#ifndef REFKV_CODEC_HPP
#define REFKV_CODEC_HPP

#include <string>
#include <utility>
#include <vector>

#include "refkv/ops.hpp"
#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

enum class CodecMode { orthogonal_patch, tiny_trainable };

struct CodecConfig {
    int image_size = 32;
    int latent_size = 8;
    int latent_channels = 4;
    CodecMode mode = CodecMode::orthogonal_patch;
    uint64_t seed = 0;
};

// Frozen encoder/decoder pair mapping images to the latent space where
// diffusion runs. The orthogonal-patch mode projects each patch onto a seeded
// orthonormal basis and is exactly reproducible; the tiny trainable mode is a
// small conv autoencoder for demonstrating the full pipeline.
class LatentCodec {
public:
    LatentCodec() = default;

    const CodecConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }
    int patch() const { return cfg_.image_size / cfg_.latent_size; }

    // image B×3×S×S in [-1,1] -> latent B×Cz×Hz×Wz (also accepts 3×S×S)
    Tensor encode(const Tensor& image) const;
    // latent -> image, differentiable; no clamping (done only at export)
    Tensor decode(const Tensor& latent) const;

    uint64_t checksum() const;
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

    void save(const std::string& dir) const;
    static LatentCodec load(const std::string& dir);

    friend LatentCodec make_orthogonal_codec(const CodecConfig& cfg);
    friend LatentCodec train_tiny_codec(const std::vector<Tensor>& images, int epochs,
                                        Rng& rng, const CodecConfig& cfg,
                                        std::vector<double>* heldout_l1);

private:
    CodecConfig cfg_;
    bool frozen_ = false;
    // orthogonal mode: enc_w (P×Cz) and dec_w (Cz×P), transposes of one
    // orthonormal-row matrix; tiny mode: conv stacks
    std::vector<std::pair<std::string, Tensor>> params_;
    Tensor find(const std::string& name) const;
    Tensor encode_tiny(const Tensor& image) const;
    Tensor decode_tiny(const Tensor& latent) const;
};

// deterministic codec from a seeded QR-style orthonormalization
LatentCodec make_orthogonal_codec(const CodecConfig& cfg);

// trains the tiny conv autoencoder on [-1,1] images, freezes it, and (when
// heldout_l1 is non-null) records the held-out reconstruction L1 per epoch,
// with the pre-training value first
LatentCodec train_tiny_codec(const std::vector<Tensor>& images, int epochs, Rng& rng,
                             const CodecConfig& cfg, std::vector<double>* heldout_l1 = nullptr);

}  // namespace refkv

#endif
