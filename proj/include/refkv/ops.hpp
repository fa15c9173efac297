#ifndef REFKV_OPS_HPP
#define REFKV_OPS_HPP

#include <vector>

#include "refkv/autodiff.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

// Differentiable kernels. Shapes are checked strictly: no broadcasting beyond
// bias adds and scalar factors. Reductions accumulate in 64-bit.

enum class Reduction { sum, mean };

// elementwise, identical shapes
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// out = offset + scale * x
Tensor affine(const Tensor& x, double offset, double scale);
// out = x * s where s is a 1-element tensor (gradient flows to both)
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);
Tensor silu(const Tensor& x);

// out[b, ...] = w[b] * x[b, ...] with constant per-row weights
Tensor scale_rows(const Tensor& x, const std::vector<double>& w);

// same elements, new extents (element count must match)
Tensor reshape_copy(const Tensor& x, std::vector<int64_t> shape);

Tensor matmul(const Tensor& a, const Tensor& b);           // M×K @ K×N
Tensor bmm(const Tensor& a, const Tensor& b);              // B×M×K @ B×K×N
Tensor transpose_last2(const Tensor& x);                   // B×M×N -> B×N×M
// x: N×D or B×T×D; w: D×E; bias: E (optional, pass undefined Tensor to skip)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps = 1e-5);
Tensor avg_pool2x(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);
Tensor downsample_nearest2x(const Tensor& x);
Tensor space_to_depth(const Tensor& x, int p);  // N×C×H×W -> N×(C·p²)×H/p×W/p
Tensor depth_to_space(const Tensor& x, int p);
// b: N×C, added per item and channel over the spatial plane
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

Tensor nchw_to_tokens(const Tensor& x);                    // N×C×H×W -> N×(HW)×C
Tensor tokens_to_nchw(const Tensor& x, int64_t h, int64_t w);

Tensor concat_channels(const Tensor& a, const Tensor& b);  // NCHW, channel axis
Tensor concat_batch(const Tensor& a, const Tensor& b);     // leading axis
// out[i] = x[idx[i]] over the leading axis; duplicates allowed
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);
Tensor concat_tokens(const Tensor& a, const Tensor& b);    // B×T×D, token axis
Tensor concat_width(const Tensor& a, const Tensor& b);     // NCHW, width axis
Tensor slice_width(const Tensor& x, int64_t w0, int64_t w1);

Tensor softmax_lastdim(const Tensor& x);
// q: B×Tq×D, k/v: B×Tk×D -> B×Tq×D
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// B×T×(h·Dh) -> (B·h)×T×Dh and back
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor l1_distance(const Tensor& a, const Tensor& b, Reduction r);
Tensor rows_dot(const Tensor& a, const Tensor& b);         // N×D · N×D -> N
Tensor weighted_mean(const Tensor& x, const std::vector<double>& w);  // N -> scalar
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// number of worker threads used by the heavy kernels (conv2d)
void set_num_threads(int n);
int num_threads();

}  // namespace refkv

#endif
