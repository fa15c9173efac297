#include "refkv/identity.hpp"

#include <cmath>
#include <stdexcept>

namespace refkv {

IdScalingMode id_scaling_mode_from_string(const std::string& s) {
    if (s == "sqrt_alpha_bar") return IdScalingMode::sqrt_alpha_bar;
    if (s == "indicator_100") return IdScalingMode::indicator_100;
    if (s == "indicator_500") return IdScalingMode::indicator_500;
    if (s == "none") return IdScalingMode::none;
    throw std::invalid_argument("unknown identity loss scaling mode '" + s + "'");
}

std::string to_string(IdScalingMode m) {
    switch (m) {
        case IdScalingMode::sqrt_alpha_bar: return "sqrt_alpha_bar";
        case IdScalingMode::indicator_100: return "indicator_100";
        case IdScalingMode::indicator_500: return "indicator_500";
        case IdScalingMode::none: return "none";
    }
    throw std::invalid_argument("unknown identity loss scaling mode");
}

FaceEmbedder make_face_embedder(int image_size, int embedding_dim, uint64_t seed) {
    if (image_size < 8 || (image_size & (image_size - 1)) != 0)
        throw std::invalid_argument("face embedder: image size must be a power of two >= 8");
    FaceEmbedder r;
    r.image_size_ = image_size;
    r.embedding_dim_ = embedding_dim;
    Rng rng(seed);
    // initialization scheme: the first three output channels of every conv
    // are exact center-tap passthroughs of the first three input channels,
    // keeping mean color observable at the head; the remaining channels are
    // damped scaled-normal texture filters
    auto conv_init = [&](int64_t oc, int64_t ic, int64_t k) {
        Tensor w = Tensor::randn({oc, ic, k, k}, rng, 0.5 / std::sqrt(double(ic * k * k)));
        for (int64_t o = 0; o < std::min<int64_t>(3, oc); ++o) {
            for (int64_t i = 0; i < ic; ++i)
                for (int64_t y = 0; y < k; ++y)
                    for (int64_t x = 0; x < k; ++x)
                        w.data()[((o * ic + i) * k + y) * k + x] = 0.0f;
            w.data()[((o * ic + o) * k + k / 2) * k + k / 2] = 1.5f;
        }
        return w;
    };
    r.params_.emplace_back("conv1_w", conv_init(8, 3, 3));
    r.params_.emplace_back("conv1_b", Tensor::zeros({8}));
    r.params_.emplace_back("conv2_w", conv_init(16, 8, 3));
    r.params_.emplace_back("conv2_b", Tensor::zeros({16}));
    r.params_.emplace_back("conv3_w", conv_init(32, 16, 3));
    r.params_.emplace_back("conv3_b", Tensor::zeros({32}));
    r.params_.emplace_back("fc_w", Tensor::randn({32, embedding_dim}, rng,
                                                 1.0 / std::sqrt(32.0)));
    r.params_.emplace_back("fc_b", Tensor::zeros({int64_t(embedding_dim)}));
    return r;
}

Tensor FaceEmbedder::find(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw std::runtime_error("face embedder: missing parameter " + name);
}

Tensor FaceEmbedder::features(const Tensor& image) const {
    Tensor img = image;
    if (img.rank() == 3) img = reshape_copy(img, {1, img.dim(0), img.dim(1), img.dim(2)});
    if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) != image_size_ ||
        img.dim(3) != image_size_)
        tensor_error("face embedder: expected 3×" + std::to_string(image_size_) + "×" +
                     std::to_string(image_size_) + " image, got " + shape_str(image.shape()));
    Tensor h = avg_pool2x(silu(conv2d(img, find("conv1_w"), find("conv1_b"), 1, 1)));
    h = avg_pool2x(silu(conv2d(h, find("conv2_w"), find("conv2_b"), 1, 1)));
    h = avg_pool2x(silu(conv2d(h, find("conv3_w"), find("conv3_b"), 1, 1)));
    while (h.dim(2) > 1) h = avg_pool2x(h);  // global average
    h = reshape_copy(h, {h.dim(0), h.dim(1)});
    return linear(h, find("fc_w"), find("fc_b"));
}

Tensor FaceEmbedder::embed(const Tensor& image) const {
    Tensor e = l2_normalize_rows(features(image));
    if (image.rank() == 3) e = reshape_copy(e, {e.dim(1)});
    return e;
}

uint64_t FaceEmbedder::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : params_) {
        uint64_t c = t.checksum();
        for (int i = 0; i < 8; ++i) {
            h ^= (c >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

namespace {
// per-item 1 - cos as a length-B tensor
Tensor identity_loss_rows(const FaceEmbedder& r, const Tensor& x, const Tensor& x_star) {
    Tensor a = x, b = x_star;
    if (a.rank() == 3) a = reshape_copy(a, {1, a.dim(0), a.dim(1), a.dim(2)});
    if (b.rank() == 3) b = reshape_copy(b, {1, b.dim(0), b.dim(1), b.dim(2)});
    if (a.dim(0) != b.dim(0)) tensor_error("identity_loss: batch axes disagree");
    Tensor ea = l2_normalize_rows(r.features(a));
    Tensor eb = l2_normalize_rows(r.features(b));
    return affine(rows_dot(ea, eb), 1.0, -1.0);
}
}  // namespace

Tensor identity_loss(const FaceEmbedder& r, const Tensor& x, const Tensor& x_star) {
    return mean_all(identity_loss_rows(r, x, x_star));
}

double id_scale_factor(int t, const NoiseSchedule& sched, IdScalingMode mode) {
    if (t < 0 || t > sched.T)
        throw std::invalid_argument("id_scale_factor: timestep outside [0,T]");
    switch (mode) {
        case IdScalingMode::sqrt_alpha_bar: return sched.sqrt_ab[size_t(t)];
        case IdScalingMode::indicator_100: return t < 100 ? 1.0 : 0.0;
        case IdScalingMode::indicator_500: return t < 500 ? 1.0 : 0.0;
        case IdScalingMode::none: return 1.0;
    }
    throw std::invalid_argument("id_scale_factor: unknown scaling mode");
}

Tensor timestep_scaled_identity_loss(const FaceEmbedder& r, const Tensor& x,
                                     const Tensor& x_star, int t, const NoiseSchedule& sched,
                                     IdScalingMode mode) {
    return affine(identity_loss(r, x, x_star), 0.0, id_scale_factor(t, sched, mode));
}

TotalLossResult total_loss(const Tensor& z0_hat, const Tensor& z0_star, const Tensor& x_hat,
                           const Tensor& x_star, int t, const NoiseSchedule& sched,
                           const LossConfig& cfg, const FaceEmbedder& r) {
    std::vector<int> ts(size_t(std::max<int64_t>(1, x_hat.rank() == 4 ? x_hat.dim(0) : 1)), t);
    return total_loss_batch(z0_hat, z0_star, x_hat, x_star, ts, sched, cfg, r);
}

TotalLossResult total_loss_batch(const Tensor& z0_hat, const Tensor& z0_star,
                                 const Tensor& x_hat, const Tensor& x_star,
                                 const std::vector<int>& t, const NoiseSchedule& sched,
                                 const LossConfig& cfg, const FaceEmbedder& r) {
    TotalLossResult res;
    Tensor l_ldm = l1_distance(z0_hat, z0_star, Reduction::mean);
    res.l_ldm = l_ldm.precise_item();
    Tensor rows = identity_loss_rows(r, x_hat, x_star);
    if (rows.dim(0) != int64_t(t.size()))
        tensor_error("total_loss: one timestep per batch item required");
    std::vector<double> w(t.size());
    for (size_t i = 0; i < t.size(); ++i)
        w[i] = id_scale_factor(t[i], sched, cfg.scaling_mode);
    Tensor scaled_id = weighted_mean(rows, w);
    res.l_time_id = scaled_id.precise_item();
    res.total = add(l_ldm, affine(scaled_id, 0.0, cfg.lambda_time_id));
    return res;
}

}  // namespace refkv
