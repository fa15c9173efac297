#ifndef REFKV_DEGRADE_HPP
#define REFKV_DEGRADE_HPP

#include <string>

#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

// (sigma, r, delta, q): blur std in pixels, down/up scale factor, noise std
// in 0-255 units, JPEG quality
struct DegradationParams {
    double sigma = 0.0;
    double r = 1.0;
    double delta = 0.0;
    int q = 100;
};

enum class DegradationPreset { moderate, severe, training };

DegradationPreset degradation_preset_from_string(const std::string& s);
std::string to_string(DegradationPreset p);

struct PresetRanges {
    double sigma_lo, sigma_hi;
    double r_lo, r_hi;
    double delta_lo, delta_hi;
    int q_lo, q_hi;
};

PresetRanges preset_ranges(DegradationPreset p);

// independent uniform draws per field, in (sigma, r, delta, q) order
DegradationParams sample_params(DegradationPreset p, Rng& rng);
DegradationParams sample_params(const std::string& preset, Rng& rng);

// separable Gaussian, kernel radius ceil(3 sigma) normalized to sum 1,
// reflect padding; sigma = 0 returns the input bitwise
Tensor gaussian_blur(const Tensor& img01, double sigma);

enum class ResampleDir { down, up };

// bilinear; down gives round(H/f), up gives round(H*f)
Tensor resample(const Tensor& img01, double factor, ResampleDir dir);
// bilinear to explicit extents (the degradation pipeline's final upsample
// restores the original extents exactly)
Tensor resample_to(const Tensor& img01, int64_t h, int64_t w);

// blur -> down(r) -> add N(0, delta/255) clipped to [0,1] -> JPEG(q) -> up(r)
Tensor degrade(const Tensor& hq01, const DegradationParams& params, Rng& rng);

}  // namespace refkv

#endif
