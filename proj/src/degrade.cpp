#include "refkv/degrade.hpp"

#include <cmath>
#include <stdexcept>

#include "refkv/image_io.hpp"
#include "refkv/jpeg.hpp"

namespace refkv {

DegradationPreset degradation_preset_from_string(const std::string& s) {
    if (s == "moderate") return DegradationPreset::moderate;
    if (s == "severe") return DegradationPreset::severe;
    if (s == "training") return DegradationPreset::training;
    throw std::invalid_argument("unknown degradation preset '" + s + "'");
}

std::string to_string(DegradationPreset p) {
    switch (p) {
        case DegradationPreset::moderate: return "moderate";
        case DegradationPreset::severe: return "severe";
        case DegradationPreset::training: return "training";
    }
    throw std::invalid_argument("unknown degradation preset");
}

PresetRanges preset_ranges(DegradationPreset p) {
    switch (p) {
        case DegradationPreset::moderate: return {0, 8, 1, 8, 0, 15, 60, 100};
        case DegradationPreset::severe: return {8, 16, 8, 32, 0, 20, 30, 100};
        case DegradationPreset::training: return {0, 16, 1, 32, 0, 20, 30, 100};
    }
    throw std::invalid_argument("unknown degradation preset");
}

DegradationParams sample_params(DegradationPreset p, Rng& rng) {
    PresetRanges r = preset_ranges(p);
    DegradationParams out;
    out.sigma = rng.uniform(r.sigma_lo, r.sigma_hi);
    out.r = rng.uniform(r.r_lo, r.r_hi);
    out.delta = rng.uniform(r.delta_lo, r.delta_hi);
    out.q = int(rng.uniform_int(r.q_lo, r.q_hi));
    return out;
}

DegradationParams sample_params(const std::string& preset, Rng& rng) {
    return sample_params(degradation_preset_from_string(preset), rng);
}

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
    // symmetric reflection with edge repeat: -1 -> 0, n -> n-1
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

void check_image(const Tensor& img, const char* op) {
    if (img.rank() != 3 || img.dim(0) != 3)
        tensor_error(std::string(op) + ": expected 3×H×W image, got " + shape_str(img.shape()));
}

}  // namespace

Tensor gaussian_blur(const Tensor& img01, double sigma) {
    check_image(img01, "gaussian_blur");
    if (sigma < 0.0) throw std::invalid_argument("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return img01;
    int64_t radius = int64_t(std::ceil(3.0 * sigma));
    std::vector<double> kernel(size_t(2 * radius + 1), 0.0);
    double sum = 0.0;
    for (int64_t j = -radius; j <= radius; ++j) {
        double v = std::exp(-double(j * j) / (2.0 * sigma * sigma));
        kernel[size_t(j + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    int64_t H = img01.dim(1), W = img01.dim(2);
    Tensor tmp = Tensor::zeros(img01.shape());
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int64_t j = -radius; j <= radius; ++j)
                    acc += kernel[size_t(j + radius)] *
                           img01.data()[(c * H + y) * W + reflect_index(x + j, W)];
                tmp.data()[(c * H + y) * W + x] = float(acc);
            }
    Tensor out = Tensor::zeros(img01.shape());
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int64_t j = -radius; j <= radius; ++j)
                    acc += kernel[size_t(j + radius)] *
                           tmp.data()[(c * H + reflect_index(y + j, H)) * W + x];
                out.data()[(c * H + y) * W + x] = float(acc);
            }
    return out;
}

Tensor resample_to(const Tensor& img01, int64_t h, int64_t w) {
    check_image(img01, "resample");
    if (h < 1 || w < 1) throw std::invalid_argument("resample: output size < 1");
    int64_t H = img01.dim(1), W = img01.dim(2);
    if (h == H && w == W) return img01;
    Tensor out = Tensor::zeros({3, h, w});
    double sy = double(H) / double(h), sx = double(W) / double(w);
    for (int c = 0; c < 3; ++c)
        for (int64_t oy = 0; oy < h; ++oy) {
            double fy = (double(oy) + 0.5) * sy - 0.5;
            fy = std::fmin(std::fmax(fy, 0.0), double(H - 1));
            int64_t y0 = int64_t(fy);
            int64_t y1 = std::min(y0 + 1, H - 1);
            double wy = fy - double(y0);
            for (int64_t ox = 0; ox < w; ++ox) {
                double fx = (double(ox) + 0.5) * sx - 0.5;
                fx = std::fmin(std::fmax(fx, 0.0), double(W - 1));
                int64_t x0 = int64_t(fx);
                int64_t x1 = std::min(x0 + 1, W - 1);
                double wx = fx - double(x0);
                const float* plane = img01.data() + c * H * W;
                double v = (1 - wy) * ((1 - wx) * plane[y0 * W + x0] + wx * plane[y0 * W + x1]) +
                           wy * ((1 - wx) * plane[y1 * W + x0] + wx * plane[y1 * W + x1]);
                out.data()[(c * h + oy) * w + ox] = float(v);
            }
        }
    return out;
}

Tensor resample(const Tensor& img01, double factor, ResampleDir dir) {
    check_image(img01, "resample");
    if (factor < 1.0) throw std::invalid_argument("resample: factor must be >= 1");
    int64_t H = img01.dim(1), W = img01.dim(2);
    int64_t h, w;
    if (dir == ResampleDir::down) {
        h = int64_t(std::llround(double(H) / factor));
        w = int64_t(std::llround(double(W) / factor));
    } else {
        h = int64_t(std::llround(double(H) * factor));
        w = int64_t(std::llround(double(W) * factor));
    }
    if (h < 1 || w < 1) throw std::invalid_argument("resample: output size < 1");
    return resample_to(img01, h, w);
}

Tensor degrade(const Tensor& hq01, const DegradationParams& params, Rng& rng) {
    check_image(hq01, "degrade");
    if (params.sigma < 0 || params.r < 1 || params.delta < 0 || params.q < 1 ||
        params.q > 100)
        throw std::invalid_argument("degrade: parameters outside their domains");
    int64_t H = hq01.dim(1), W = hq01.dim(2);

    Tensor x = gaussian_blur(hq01, params.sigma);
    x = resample(x, params.r, ResampleDir::down);

    // additive Gaussian noise in normalized units, clipped before the codec
    double std01 = params.delta / 255.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = double(x.data()[i]) + (std01 > 0 ? rng.normal() * std01 : 0.0);
        x.data()[i] = float(std::fmin(1.0, std::fmax(0.0, v)));
    }

    std::vector<uint8_t> bits = jpeg_encode(tensor_to_rgb8(x), params.q);
    x = rgb8_to_tensor(jpeg_decode(bits));

    return resample_to(x, H, W);
}

}  // namespace refkv
