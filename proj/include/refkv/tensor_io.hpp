#ifndef REFKV_TENSOR_IO_HPP
#define REFKV_TENSOR_IO_HPP

#include <string>

#include "refkv/tensor.hpp"

namespace refkv {

// RKVT binary tensor file: magic "RKVT", u8 version=1, u8 dtype (0 = f32),
// u8 rank, u8 reserved, rank little-endian u64 extents, row-major
// little-endian f32 payload.
void save_rkvt(const Tensor& t, const std::string& path);
Tensor load_rkvt(const std::string& path);

}  // namespace refkv

#endif
