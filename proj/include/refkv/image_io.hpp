#ifndef REFKV_IMAGE_IO_HPP
#define REFKV_IMAGE_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "refkv/tensor.hpp"

namespace refkv {

// 8-bit interleaved RGB
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;
};

// binary PPM (P6), maxval 255
void save_ppm(const RgbImage& img, const std::string& path);
RgbImage load_ppm(const std::string& path);

// planar [0,1] float 3×H×W <-> 8-bit RGB (round-to-nearest, clamped)
RgbImage tensor_to_rgb8(const Tensor& img01);
Tensor rgb8_to_tensor(const RgbImage& img);

void save_image01(const Tensor& img01, const std::string& path);
Tensor load_image01(const std::string& path);

}  // namespace refkv

#endif
