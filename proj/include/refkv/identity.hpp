#ifndef REFKV_IDENTITY_HPP
#define REFKV_IDENTITY_HPP

#include <string>
#include <utility>
#include <vector>

#include "refkv/diffusion.hpp"
#include "refkv/ops.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

enum class IdScalingMode { sqrt_alpha_bar, indicator_100, indicator_500, none };

IdScalingMode id_scaling_mode_from_string(const std::string& s);
std::string to_string(IdScalingMode m);

struct LossConfig {
    double lambda_time_id = 0.1;
    IdScalingMode scaling_mode = IdScalingMode::sqrt_alpha_bar;
};

// Small frozen conv net standing in for a face recognition model: three
// conv+pool stages, global average, linear head, L2-normalized output.
// Differentiable w.r.t. the input image, never trained.
class FaceEmbedder {
public:
    FaceEmbedder() = default;

    int image_size() const { return image_size_; }
    int embedding_dim() const { return embedding_dim_; }

    // image 3×S×S or B×3×S×S in [0,1] (or [-1,1]); returns unit rows
    Tensor embed(const Tensor& image) const;
    // penultimate activations before normalization (feature source for FID)
    Tensor features(const Tensor& image) const;

    uint64_t checksum() const;

    friend FaceEmbedder make_face_embedder(int image_size, int embedding_dim, uint64_t seed);

private:
    int image_size_ = 32;
    int embedding_dim_ = 32;
    std::vector<std::pair<std::string, Tensor>> params_;
    Tensor find(const std::string& name) const;
};

FaceEmbedder make_face_embedder(int image_size = 32, int embedding_dim = 32,
                                uint64_t seed = 2024);

// 1 - cos(R(x), R(x*)), averaged over the batch; in [0, 2]
Tensor identity_loss(const FaceEmbedder& r, const Tensor& x, const Tensor& x_star);

// the Table-4 scale factor for one timestep
double id_scale_factor(int t, const NoiseSchedule& sched, IdScalingMode mode);

Tensor timestep_scaled_identity_loss(const FaceEmbedder& r, const Tensor& x,
                                     const Tensor& x_star, int t, const NoiseSchedule& sched,
                                     IdScalingMode mode);

struct TotalLossResult {
    Tensor total;       // scalar on the autodiff path
    double l_ldm = 0;   // L1 latent component
    double l_time_id = 0;  // scaled identity component (already scaled, before lambda)
};

// L1(z0_hat, z0*) + lambda · timestep-scaled identity loss; x_hat must be the
// decoded z0_hat so gradients reach the latent through the frozen decoder
TotalLossResult total_loss(const Tensor& z0_hat, const Tensor& z0_star, const Tensor& x_hat,
                           const Tensor& x_star, int t, const NoiseSchedule& sched,
                           const LossConfig& cfg, const FaceEmbedder& r);

// batched variant with one timestep per item
TotalLossResult total_loss_batch(const Tensor& z0_hat, const Tensor& z0_star,
                                 const Tensor& x_hat, const Tensor& x_star,
                                 const std::vector<int>& t, const NoiseSchedule& sched,
                                 const LossConfig& cfg, const FaceEmbedder& r);

}  // namespace refkv

#endif
