#ifndef REFKV_JPEG_HPP
#define REFKV_JPEG_HPP

#include <cstdint>
#include <vector>

#include "refkv/image_io.hpp"

namespace refkv {

// Self-contained baseline JPEG: JFIF headers, 4:2:0 subsampling, 8×8 DCT,
// quality-scaled Annex-K quantization tables, zigzag, standard Huffman
// tables. Quality follows the usual scale = q < 50 ? 5000/q : 200 - 2q rule,
// so q = 100 clamps every quantizer entry to 1.
std::vector<uint8_t> jpeg_encode(const RgbImage& img, int quality);

// Decodes bitstreams produced by jpeg_encode (baseline sequential, standard
// component layouts). Malformed input raises std::runtime_error naming the
// byte offset.
RgbImage jpeg_decode(const std::vector<uint8_t>& bytes);

}  // namespace refkv

#endif
