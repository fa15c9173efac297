#ifndef REFKV_TEST_ORACLES_HPP
#define REFKV_TEST_ORACLES_HPP

// Independent reference implementations used by the tests. These stay
// deliberately naive (straight loops, double precision) and must not call
// into the kernels they check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace oracles {

inline refkv::Tensor rand_tensor(std::vector<int64_t> shape, refkv::Rng& rng,
                                 double lo = -1.0, double hi = 1.0) {
    refkv::Tensor t = refkv::Tensor::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = float(rng.uniform(lo, hi));
    return t;
}

inline double max_abs_diff(const refkv::Tensor& a, const refkv::Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

// six nested loops, no shortcuts
inline refkv::Tensor conv2d_naive(const refkv::Tensor& in, const refkv::Tensor& w,
                                  const refkv::Tensor& bias, int stride, int pad) {
    int64_t N = in.dim(0), I = in.dim(1), H = in.dim(2), W = in.dim(3);
    int64_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    int64_t OH = (H + 2 * pad - KH) / stride + 1;
    int64_t OW = (W + 2 * pad - KW) / stride + 1;
    refkv::Tensor out = refkv::Tensor::zeros({N, O, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    double acc = bias.defined() ? double(bias.data()[o]) : 0.0;
                    for (int64_t i = 0; i < I; ++i)
                        for (int64_t ky = 0; ky < KH; ++ky)
                            for (int64_t kx = 0; kx < KW; ++kx) {
                                int64_t iy = oy * stride - pad + ky;
                                int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += double(in.data()[((n * I + i) * H + iy) * W + ix]) *
                                       double(w.data()[((o * I + i) * KH + ky) * KW + kx]);
                            }
                    out.data()[((n * O + o) * OH + oy) * OW + ox] = float(acc);
                }
    return out;
}

// explicit softmax(q kᵀ/√D) v in double
inline refkv::Tensor attention_naive(const refkv::Tensor& q, const refkv::Tensor& k,
                                     const refkv::Tensor& v) {
    int64_t B = q.dim(0), Tq = q.dim(1), D = q.dim(2), Tk = k.dim(1);
    refkv::Tensor out = refkv::Tensor::zeros({B, Tq, D});
    double scale = 1.0 / std::sqrt(double(D));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Tq; ++i) {
            std::vector<double> logits(size_t(Tk), 0.0);
            for (int64_t j = 0; j < Tk; ++j) {
                double dot = 0.0;
                for (int64_t d = 0; d < D; ++d)
                    dot += double(q.data()[(b * Tq + i) * D + d]) *
                           double(k.data()[(b * Tk + j) * D + d]);
                logits[size_t(j)] = dot * scale;
            }
            double mx = logits[0];
            for (double l : logits) mx = std::max(mx, l);
            double sum = 0.0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                sum += l;
            }
            for (int64_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int64_t j = 0; j < Tk; ++j)
                    acc += logits[size_t(j)] / sum * double(v.data()[(b * Tk + j) * D + d]);
                out.data()[(b * Tq + i) * D + d] = float(acc);
            }
        }
    return out;
}

inline refkv::Tensor matmul_naive(const refkv::Tensor& a, const refkv::Tensor& b) {
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    refkv::Tensor out = refkv::Tensor::zeros({M, N});
    for (int64_t m = 0; m < M; ++m)
        for (int64_t n = 0; n < N; ++n) {
            double acc = 0.0;
            for (int64_t k = 0; k < K; ++k)
                acc += double(a.data()[m * K + k]) * double(b.data()[k * N + n]);
            out.data()[m * N + n] = float(acc);
        }
    return out;
}

inline refkv::Tensor group_norm_naive(const refkv::Tensor& x, const refkv::Tensor& gamma,
                                      const refkv::Tensor& beta, int groups, double eps) {
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t cper = C / groups;
    refkv::Tensor out = refkv::Tensor::zeros(x.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            double mean = 0.0;
            int64_t m = cper * H * W;
            for (int64_t c = 0; c < cper; ++c)
                for (int64_t j = 0; j < H * W; ++j)
                    mean += x.data()[((n * C + g * cper + c) * H * W) + j];
            mean /= double(m);
            double var = 0.0;
            for (int64_t c = 0; c < cper; ++c)
                for (int64_t j = 0; j < H * W; ++j) {
                    double d = x.data()[((n * C + g * cper + c) * H * W) + j] - mean;
                    var += d * d;
                }
            var /= double(m);
            for (int64_t c = 0; c < cper; ++c)
                for (int64_t j = 0; j < H * W; ++j) {
                    int64_t idx = ((n * C + g * cper + c) * H * W) + j;
                    double xh = (x.data()[idx] - mean) / std::sqrt(var + eps);
                    out.data()[idx] = float(double(gamma.data()[g * cper + c]) * xh +
                                            double(beta.data()[g * cper + c]));
                }
        }
    return out;
}

}  // namespace oracles

#endif
