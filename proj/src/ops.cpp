#include "refkv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

namespace refkv {

namespace {

int g_num_threads = []() {
    unsigned hc = std::thread::hardware_concurrency();
    return int(std::min(4u, hc ? hc : 1u));
}();

// f(lo, hi) over disjoint ranges; used only where writes are disjoint so the
// result does not depend on the thread count.
template <typename F>
void parallel_for(int64_t n, int64_t min_work_per_item, int64_t total_work, F&& f) {
    int k = g_num_threads;
    if (k <= 1 || n <= 1 || total_work < min_work_per_item) {
        f(0, n);
        return;
    }
    k = int(std::min<int64_t>(k, n));
    int64_t per = (n + k - 1) / k;
    std::vector<std::thread> threads;
    for (int i = 0; i < k; ++i) {
        int64_t lo = i * per, hi = std::min<int64_t>(n, lo + per);
        if (lo >= hi) break;
        threads.emplace_back([&f, lo, hi] { f(lo, hi); });
    }
    for (auto& t : threads) t.join();
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        tensor_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void check_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank)
        tensor_error(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + shape_str(t.shape()));
}

}  // namespace

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape(), want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                for (int64_t i = 0; i < co.numel(); ++i) ga[i] += g[i];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t i = 0; i < co.numel(); ++i) gb[i] += g[i];
            }
        });
    }
    if (out.numel() == 1) out.set_precise(a.precise_item() + b.precise_item());
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape(), want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                for (int64_t i = 0; i < co.numel(); ++i) ga[i] += g[i];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t i = 0; i < co.numel(); ++i) gb[i] -= g[i];
            }
        });
    }
    if (out.numel() == 1) out.set_precise(a.precise_item() - b.precise_item());
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape(), want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                const float* pb2 = cb.data();
                for (int64_t i = 0; i < co.numel(); ++i) ga[i] += g[i] * pb2[i];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                const float* pa2 = ca.data();
                for (int64_t i = 0; i < co.numel(); ++i) gb[i] += g[i] * pa2[i];
            }
        });
    }
    if (out.numel() == 1) out.set_precise(a.precise_item() * b.precise_item());
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape(), want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] / pb[i];
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co]() mutable {
            const float* g = co.grad();
            const float* pa2 = ca.data();
            const float* pb2 = cb.data();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                for (int64_t i = 0; i < co.numel(); ++i) ga[i] += g[i] / pb2[i];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t i = 0; i < co.numel(); ++i)
                    gb[i] -= g[i] * pa2[i] / (pb2[i] * pb2[i]);
            }
        });
    }
    if (out.numel() == 1) out.set_precise(a.precise_item() / b.precise_item());
    return out;
}

Tensor affine(const Tensor& x, double offset, double scale) {
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        po[i] = float(offset + scale * double(px[i]));
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, scale]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t i = 0; i < co.numel(); ++i) gx[i] += float(scale * g[i]);
        });
    }
    if (out.numel() == 1) out.set_precise(offset + scale * x.precise_item());
    return out;
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) tensor_error("mul_scalar_tensor: scale must have 1 element");
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x, &s}));
    const float sv = s.data()[0];
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * sv;
    if (out.requires_grad()) {
        Tensor cx = x, cs = s, co = out;
        tape().record([cx, cs, co]() mutable {
            const float* g = co.grad();
            if (cx.requires_grad()) {
                float* gx = cx.grad();
                const float sv2 = cs.data()[0];
                for (int64_t i = 0; i < co.numel(); ++i) gx[i] += g[i] * sv2;
            }
            if (cs.requires_grad()) {
                double acc = 0.0;
                const float* px2 = cx.data();
                for (int64_t i = 0; i < co.numel(); ++i) acc += double(g[i]) * px2[i];
                cs.grad()[0] += float(acc);
            }
        });
    }
    if (out.numel() == 1) out.set_precise(x.precise_item() * s.precise_item());
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-double(px[i])));
        po[i] = float(px[i] * s);
    }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co]() mutable {
            const float* g = co.grad();
            const float* px2 = cx.data();
            float* gx = cx.grad();
            for (int64_t i = 0; i < co.numel(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-double(px2[i])));
                gx[i] += float(g[i] * s * (1.0 + px2[i] * (1.0 - s)));
            }
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& w) {
    if (x.rank() < 1 || x.dim(0) != int64_t(w.size()))
        tensor_error("scale_rows: weight count does not match leading extent");
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x}));
    int64_t rows = x.dim(0), stride = x.numel() / rows;
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        float wv = float(w[size_t(r)]);
        for (int64_t i = 0; i < stride; ++i) po[r * stride + i] = px[r * stride + i] * wv;
    }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        std::vector<double> wc = w;
        tape().record([cx, co, wc, rows, stride]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t r = 0; r < rows; ++r) {
                float wv = float(wc[size_t(r)]);
                for (int64_t i = 0; i < stride; ++i) gx[r * stride + i] += g[r * stride + i] * wv;
            }
        });
    }
    return out;
}

Tensor reshape_copy(const Tensor& x, std::vector<int64_t> shape) {
    if (numel_of(shape) != x.numel())
        tensor_error("reshape_copy: element count mismatch for " + shape_str(shape));
    Tensor out = Tensor::zeros(std::move(shape), want_grad({&x}));
    std::memcpy(out.data(), x.data(), size_t(x.numel()) * 4);
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t i = 0; i < co.numel(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul");
    check_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        tensor_error("matmul: inner extents disagree, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
    int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out = Tensor::zeros({M, N}, want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    std::vector<double> row(static_cast<size_t>(N), 0.0);
    for (int64_t m = 0; m < M; ++m) {
        std::fill(row.begin(), row.end(), 0.0);
        for (int64_t k = 0; k < K; ++k) {
            double av = pa[m * K + k];
            const float* brow = pb + k * N;
            for (int64_t n = 0; n < N; ++n) row[size_t(n)] += av * brow[n];
        }
        for (int64_t n = 0; n < N; ++n) po[m * N + n] = float(row[size_t(n)]);
    }
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co, M, K, N]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                const float* pb2 = cb.data();
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        const float* grow = g + m * N;
                        const float* brow = pb2 + k * N;
                        for (int64_t n = 0; n < N; ++n) acc += double(grow[n]) * brow[n];
                        ga[m * K + k] += float(acc);
                    }
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                const float* pa2 = ca.data();
                for (int64_t k = 0; k < K; ++k)
                    for (int64_t n = 0; n < N; ++n) {
                        double acc = 0.0;
                        for (int64_t m = 0; m < M; ++m)
                            acc += double(pa2[m * K + k]) * g[m * N + n];
                        gb[k * N + n] += float(acc);
                    }
            }
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_rank(a, 3, "bmm");
    check_rank(b, 3, "bmm");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        tensor_error("bmm: incompatible shapes " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
    int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    Tensor out = Tensor::zeros({B, M, N}, want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    std::vector<double> row(static_cast<size_t>(N), 0.0);
    for (int64_t bi = 0; bi < B; ++bi) {
        const float* ab = pa + bi * M * K;
        const float* bb = pb + bi * K * N;
        float* ob = po + bi * M * N;
        for (int64_t m = 0; m < M; ++m) {
            std::fill(row.begin(), row.end(), 0.0);
            for (int64_t k = 0; k < K; ++k) {
                double av = ab[m * K + k];
                const float* brow = bb + k * N;
                for (int64_t n = 0; n < N; ++n) row[size_t(n)] += av * brow[n];
            }
            for (int64_t n = 0; n < N; ++n) ob[m * N + n] = float(row[size_t(n)]);
        }
    }
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co, B, M, K, N]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                const float* pb2 = cb.data();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t m = 0; m < M; ++m)
                        for (int64_t k = 0; k < K; ++k) {
                            double acc = 0.0;
                            const float* grow = g + (bi * M + m) * N;
                            const float* brow = pb2 + (bi * K + k) * N;
                            for (int64_t n = 0; n < N; ++n) acc += double(grow[n]) * brow[n];
                            ga[(bi * M + m) * K + k] += float(acc);
                        }
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                const float* pa2 = ca.data();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t k = 0; k < K; ++k)
                        for (int64_t n = 0; n < N; ++n) {
                            double acc = 0.0;
                            for (int64_t m = 0; m < M; ++m)
                                acc += double(pa2[(bi * M + m) * K + k]) * g[(bi * M + m) * N + n];
                            gb[(bi * K + k) * N + n] += float(acc);
                        }
            }
        });
    }
    return out;
}

Tensor transpose_last2(const Tensor& x) {
    check_rank(x, 3, "transpose_last2");
    int64_t B = x.dim(0), M = x.dim(1), N = x.dim(2);
    Tensor out = Tensor::zeros({B, N, M}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t m = 0; m < M; ++m)
            for (int64_t n = 0; n < N; ++n)
                po[(b * N + n) * M + m] = px[(b * M + m) * N + n];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, B, M, N]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t n = 0; n < N; ++n)
                        gx[(b * M + m) * N + n] += g[(b * N + n) * M + m];
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_rank(w, 2, "linear");
    if (x.rank() != 2 && x.rank() != 3)
        tensor_error("linear: input must be rank 2 or 3, got " + shape_str(x.shape()));
    int64_t D = x.dim(x.rank() - 1);
    if (D != w.dim(0))
        tensor_error("linear: feature extent " + std::to_string(D) +
                     " does not match weight rows " + std::to_string(w.dim(0)));
    int64_t E = w.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != E))
        tensor_error("linear: bias extent must equal output features");
    std::vector<int64_t> oshape = x.shape();
    oshape.back() = E;
    int64_t R = x.numel() / D;
    Tensor out = Tensor::zeros(oshape, want_grad({&x, &w, &bias}));
    const float* px = x.data();
    const float* pw = w.data();
    float* po = out.data();
    std::vector<double> row(static_cast<size_t>(E), 0.0);
    for (int64_t r = 0; r < R; ++r) {
        if (bias.defined()) {
            const float* pbv = bias.data();
            for (int64_t e = 0; e < E; ++e) row[size_t(e)] = pbv[e];
        } else {
            std::fill(row.begin(), row.end(), 0.0);
        }
        const float* xr = px + r * D;
        for (int64_t d = 0; d < D; ++d) {
            double xv = xr[d];
            const float* wrow = pw + d * E;
            for (int64_t e = 0; e < E; ++e) row[size_t(e)] += xv * wrow[e];
        }
        for (int64_t e = 0; e < E; ++e) po[r * E + e] = float(row[size_t(e)]);
    }
    if (out.requires_grad()) {
        Tensor cx = x, cw = w, cb = bias, co = out;
        tape().record([cx, cw, cb, co, R, D, E]() mutable {
            const float* g = co.grad();
            if (cx.requires_grad()) {
                float* gx = cx.grad();
                const float* pw2 = cw.data();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t d = 0; d < D; ++d) {
                        double acc = 0.0;
                        const float* grow = g + r * E;
                        const float* wrow = pw2 + d * E;
                        for (int64_t e = 0; e < E; ++e) acc += double(grow[e]) * wrow[e];
                        gx[r * D + d] += float(acc);
                    }
            }
            if (cw.requires_grad()) {
                float* gw = cw.grad();
                const float* px2 = cx.data();
                for (int64_t d = 0; d < D; ++d)
                    for (int64_t e = 0; e < E; ++e) {
                        double acc = 0.0;
                        for (int64_t r = 0; r < R; ++r)
                            acc += double(px2[r * D + d]) * g[r * E + e];
                        gw[d * E + e] += float(acc);
                    }
            }
            if (cb.defined() && cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t e = 0; e < E; ++e) {
                    double acc = 0.0;
                    for (int64_t r = 0; r < R; ++r) acc += g[r * E + e];
                    gb[e] += float(acc);
                }
            }
        });
    }
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
    check_rank(input, 4, "conv2d input");
    check_rank(weight, 4, "conv2d weight");
    if (stride < 1) tensor_error("conv2d: stride must be >= 1");
    if (pad < 0) tensor_error("conv2d: pad must be >= 0");
    int64_t N = input.dim(0), I = input.dim(1), H = input.dim(2), W = input.dim(3);
    int64_t O = weight.dim(0), WI = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    if (I != WI)
        tensor_error("conv2d: input channel axis " + std::to_string(I) +
                     " does not match weight channel axis " + std::to_string(WI));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
        tensor_error("conv2d: bias axis must equal output channels " + std::to_string(O));
    if (H + 2 * pad < KH || W + 2 * pad < KW)
        tensor_error("conv2d: kernel exceeds padded spatial axes");
    int64_t OH = (H + 2 * pad - KH) / stride + 1;
    int64_t OW = (W + 2 * pad - KW) / stride + 1;

    Tensor out = Tensor::zeros({N, O, OH, OW}, want_grad({&input, &weight, &bias}));
    const float* px = input.data();
    const float* pw = weight.data();
    float* po = out.data();
    const int64_t plane_macs = I * KH * KW * OH * OW;

    parallel_for(N * O, 100000, N * O * plane_macs, [&](int64_t lo, int64_t hi) {
        std::vector<double> acc(static_cast<size_t>(OH * OW), 0.0);
        for (int64_t no = lo; no < hi; ++no) {
            int64_t n = no / O, o = no % O;
            double b = bias.defined() ? double(bias.data()[o]) : 0.0;
            std::fill(acc.begin(), acc.end(), b);
            const float* wbase = pw + o * I * KH * KW;
            const float* xbase = px + n * I * H * W;
            for (int64_t i = 0; i < I; ++i)
                for (int64_t ky = 0; ky < KH; ++ky)
                    for (int64_t kx = 0; kx < KW; ++kx) {
                        double wv = wbase[(i * KH + ky) * KW + kx];
                        if (wv == 0.0) continue;
                        for (int64_t oy = 0; oy < OH; ++oy) {
                            int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            const float* xrow = xbase + (i * H + iy) * W;
                            double* arow = acc.data() + oy * OW;
                            for (int64_t ox = 0; ox < OW; ++ox) {
                                int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                arow[ox] += wv * xrow[ix];
                            }
                        }
                    }
            float* orow = po + no * OH * OW;
            for (int64_t j = 0; j < OH * OW; ++j) orow[j] = float(acc[size_t(j)]);
        }
    });

    if (out.requires_grad()) {
        Tensor cx = input, cw = weight, cb = bias, co = out;
        tape().record([cx, cw, cb, co, stride, pad, N, I, H, W, O, KH, KW, OH, OW]() mutable {
            const float* g = co.grad();
            const int64_t plane_macs = I * KH * KW * OH * OW;
            if (cb.defined() && cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t o = 0; o < O; ++o) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* grow = g + (n * O + o) * OH * OW;
                        for (int64_t j = 0; j < OH * OW; ++j) acc += grow[j];
                    }
                    gb[o] += float(acc);
                }
            }
            if (cw.requires_grad()) {
                float* gw = cw.grad();
                const float* px2 = cx.data();
                parallel_for(O, 100000, O * N * plane_macs / std::max<int64_t>(O, 1),
                             [&](int64_t olo, int64_t ohi) {
                    std::vector<double> dw(static_cast<size_t>(I * KH * KW), 0.0);
                    for (int64_t o = olo; o < ohi; ++o) {
                        std::fill(dw.begin(), dw.end(), 0.0);
                        for (int64_t n = 0; n < N; ++n) {
                            const float* grow = g + (n * O + o) * OH * OW;
                            const float* xbase = px2 + n * I * H * W;
                            for (int64_t oy = 0; oy < OH; ++oy)
                                for (int64_t ox = 0; ox < OW; ++ox) {
                                    double gv = grow[oy * OW + ox];
                                    if (gv == 0.0) continue;
                                    for (int64_t i = 0; i < I; ++i)
                                        for (int64_t ky = 0; ky < KH; ++ky) {
                                            int64_t iy = oy * stride - pad + ky;
                                            if (iy < 0 || iy >= H) continue;
                                            const float* xrow = xbase + (i * H + iy) * W;
                                            for (int64_t kx = 0; kx < KW; ++kx) {
                                                int64_t ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                dw[size_t((i * KH + ky) * KW + kx)] += gv * xrow[ix];
                                            }
                                        }
                                }
                        }
                        float* gwo = gw + o * I * KH * KW;
                        for (int64_t j = 0; j < I * KH * KW; ++j) gwo[j] += float(dw[size_t(j)]);
                    }
                });
            }
            if (cx.requires_grad()) {
                float* gx = cx.grad();
                const float* pw2 = cw.data();
                parallel_for(N, 100000, N * O * plane_macs, [&](int64_t nlo, int64_t nhi) {
                    std::vector<double> dx(static_cast<size_t>(I * H * W), 0.0);
                    for (int64_t n = nlo; n < nhi; ++n) {
                        std::fill(dx.begin(), dx.end(), 0.0);
                        for (int64_t o = 0; o < O; ++o) {
                            const float* grow = g + (n * O + o) * OH * OW;
                            const float* wbase = pw2 + o * I * KH * KW;
                            for (int64_t oy = 0; oy < OH; ++oy)
                                for (int64_t ox = 0; ox < OW; ++ox) {
                                    double gv = grow[oy * OW + ox];
                                    if (gv == 0.0) continue;
                                    for (int64_t i = 0; i < I; ++i)
                                        for (int64_t ky = 0; ky < KH; ++ky) {
                                            int64_t iy = oy * stride - pad + ky;
                                            if (iy < 0 || iy >= H) continue;
                                            double* dxrow = dx.data() + (i * H + iy) * W;
                                            const float* wrow = wbase + (i * KH + ky) * KW;
                                            for (int64_t kx = 0; kx < KW; ++kx) {
                                                int64_t ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                dxrow[ix] += gv * wrow[kx];
                                            }
                                        }
                                }
                        }
                        float* gxn = gx + n * I * H * W;
                        for (int64_t j = 0; j < I * H * W; ++j) gxn[j] += float(dx[size_t(j)]);
                    }
                });
            }
        });
    }
    return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps) {
    check_rank(x, 4, "group_norm");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups < 1 || C % groups != 0)
        tensor_error("group_norm: channel axis " + std::to_string(C) +
                     " not divisible by groups " + std::to_string(groups));
    if (gamma.numel() != C || beta.numel() != C)
        tensor_error("group_norm: gamma/beta must have one entry per channel");
    int64_t cper = C / groups, m = cper * H * W;
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x, &gamma, &beta}));
    std::vector<float> xhat(static_cast<size_t>(x.numel()), 0.0f);
    std::vector<double> inv_std(static_cast<size_t>(N * groups), 0.0);
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t gidx = 0; gidx < groups; ++gidx) {
            const float* base = px + (n * C + gidx * cper) * H * W;
            double mean = 0.0;
            for (int64_t j = 0; j < m; ++j) mean += base[j];
            mean /= double(m);
            double var = 0.0;
            for (int64_t j = 0; j < m; ++j) {
                double d = base[j] - mean;
                var += d * d;
            }
            var /= double(m);
            double istd = 1.0 / std::sqrt(var + eps);
            inv_std[size_t(n * groups + gidx)] = istd;
            float* hbase = xhat.data() + (n * C + gidx * cper) * H * W;
            float* obase = po + (n * C + gidx * cper) * H * W;
            for (int64_t c = 0; c < cper; ++c) {
                float gc = pg[gidx * cper + c];
                float bc = pb[gidx * cper + c];
                for (int64_t j = 0; j < H * W; ++j) {
                    float hv = float((base[c * H * W + j] - mean) * istd);
                    hbase[c * H * W + j] = hv;
                    obase[c * H * W + j] = gc * hv + bc;
                }
            }
        }
    if (out.requires_grad()) {
        Tensor cx = x, cg = gamma, cb = beta, co = out;
        auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
        auto istds = std::make_shared<std::vector<double>>(std::move(inv_std));
        tape().record([cx, cg, cb, co, xh, istds, N, C, H, W, groups, cper, m]() mutable {
            const float* g = co.grad();
            const float* ph = xh->data();
            const float* pg2 = cg.data();
            if (cg.requires_grad() || cb.requires_grad()) {
                for (int64_t c = 0; c < C; ++c) {
                    double dgc = 0.0, dbc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* grow = g + (n * C + c) * H * W;
                        const float* hrow = ph + (n * C + c) * H * W;
                        for (int64_t j = 0; j < H * W; ++j) {
                            dgc += double(grow[j]) * hrow[j];
                            dbc += grow[j];
                        }
                    }
                    if (cg.requires_grad()) cg.grad()[c] += float(dgc);
                    if (cb.requires_grad()) cb.grad()[c] += float(dbc);
                }
            }
            if (cx.requires_grad()) {
                float* gx = cx.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t gi = 0; gi < groups; ++gi) {
                        double istd = (*istds)[size_t(n * groups + gi)];
                        const float* gbase = g + (n * C + gi * cper) * H * W;
                        const float* hbase = ph + (n * C + gi * cper) * H * W;
                        double sum_dh = 0.0, sum_dh_h = 0.0;
                        for (int64_t c = 0; c < cper; ++c) {
                            double gc = pg2[gi * cper + c];
                            for (int64_t j = 0; j < H * W; ++j) {
                                double dh = gc * gbase[c * H * W + j];
                                sum_dh += dh;
                                sum_dh_h += dh * hbase[c * H * W + j];
                            }
                        }
                        float* gxbase = gx + (n * C + gi * cper) * H * W;
                        for (int64_t c = 0; c < cper; ++c) {
                            double gc = pg2[gi * cper + c];
                            for (int64_t j = 0; j < H * W; ++j) {
                                double dh = gc * gbase[c * H * W + j];
                                double hv = hbase[c * H * W + j];
                                gxbase[c * H * W + j] +=
                                    float(istd * (dh - (sum_dh + hv * sum_dh_h) / double(m)));
                            }
                        }
                    }
            }
        });
    }
    return out;
}

Tensor avg_pool2x(const Tensor& x) {
    check_rank(x, 4, "avg_pool2x");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) tensor_error("avg_pool2x: spatial axes must be even");
    Tensor out = Tensor::zeros({N, C, H / 2, W / 2}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* in = px + nc * H * W;
        float* op = po + nc * (H / 2) * (W / 2);
        for (int64_t y = 0; y < H / 2; ++y)
            for (int64_t xo = 0; xo < W / 2; ++xo)
                op[y * (W / 2) + xo] =
                    0.25f * (in[(2 * y) * W + 2 * xo] + in[(2 * y) * W + 2 * xo + 1] +
                             in[(2 * y + 1) * W + 2 * xo] + in[(2 * y + 1) * W + 2 * xo + 1]);
    }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, C, H, W]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const float* gp = g + nc * (H / 2) * (W / 2);
                float* gi = gx + nc * H * W;
                for (int64_t y = 0; y < H / 2; ++y)
                    for (int64_t xo = 0; xo < W / 2; ++xo) {
                        float gv = 0.25f * gp[y * (W / 2) + xo];
                        gi[(2 * y) * W + 2 * xo] += gv;
                        gi[(2 * y) * W + 2 * xo + 1] += gv;
                        gi[(2 * y + 1) * W + 2 * xo] += gv;
                        gi[(2 * y + 1) * W + 2 * xo + 1] += gv;
                    }
            }
        });
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    check_rank(x, 4, "upsample_nearest2x");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::zeros({N, C, H * 2, W * 2}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t xo = 0; xo < 2 * W; ++xo)
                po[nc * 4 * H * W + y * 2 * W + xo] = px[nc * H * W + (y / 2) * W + xo / 2];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, C, H, W]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t nc = 0; nc < N * C; ++nc)
                for (int64_t y = 0; y < 2 * H; ++y)
                    for (int64_t xo = 0; xo < 2 * W; ++xo)
                        gx[nc * H * W + (y / 2) * W + xo / 2] +=
                            g[nc * 4 * H * W + y * 2 * W + xo];
        });
    }
    return out;
}

Tensor downsample_nearest2x(const Tensor& x) {
    check_rank(x, 4, "downsample_nearest2x");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        tensor_error("downsample_nearest2x: spatial axes must be even");
    Tensor out = Tensor::zeros({N, C, H / 2, W / 2}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < H / 2; ++y)
            for (int64_t xo = 0; xo < W / 2; ++xo)
                po[nc * (H / 2) * (W / 2) + y * (W / 2) + xo] =
                    px[nc * H * W + (2 * y) * W + 2 * xo];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, C, H, W]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t nc = 0; nc < N * C; ++nc)
                for (int64_t y = 0; y < H / 2; ++y)
                    for (int64_t xo = 0; xo < W / 2; ++xo)
                        gx[nc * H * W + (2 * y) * W + 2 * xo] +=
                            g[nc * (H / 2) * (W / 2) + y * (W / 2) + xo];
        });
    }
    return out;
}

namespace {
// shared helper for the two block permutations
Tensor block_permute(const Tensor& x, int p, bool to_depth) {
    check_rank(x, 4, to_depth ? "space_to_depth" : "depth_to_space");
    if (p < 1) tensor_error("block size must be >= 1");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<int64_t> oshape;
    if (to_depth) {
        if (H % p != 0 || W % p != 0)
            tensor_error("space_to_depth: spatial axes not divisible by block size");
        oshape = {N, C * p * p, H / p, W / p};
    } else {
        if (C % (int64_t(p) * p) != 0)
            tensor_error("depth_to_space: channel axis not divisible by block area");
        oshape = {N, C / (int64_t(p) * p), H * p, W * p};
    }
    Tensor out = Tensor::zeros(oshape, want_grad({&x}));
    // index map from output to input, reused by the backward pass
    int64_t total = out.numel();
    auto idx_map = std::make_shared<std::vector<int64_t>>(size_t(total));
    int64_t OC = oshape[1], OHh = oshape[2], OWw = oshape[3];
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oc = 0; oc < OC; ++oc)
            for (int64_t oy = 0; oy < OHh; ++oy)
                for (int64_t ox = 0; ox < OWw; ++ox) {
                    int64_t ic, iy, ix;
                    if (to_depth) {
                        ic = oc / (int64_t(p) * p);
                        int64_t rem = oc % (int64_t(p) * p);
                        iy = oy * p + rem / p;
                        ix = ox * p + rem % p;
                    } else {
                        int64_t dy = oy % p, dx = ox % p;
                        ic = oc * p * p + dy * p + dx;
                        iy = oy / p;
                        ix = ox / p;
                    }
                    int64_t oidx = ((n * OC + oc) * OHh + oy) * OWw + ox;
                    (*idx_map)[size_t(oidx)] = ((n * C + ic) * H + iy) * W + ix;
                }
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < total; ++i) po[i] = px[(*idx_map)[size_t(i)]];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, idx_map]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t i = 0; i < co.numel(); ++i) gx[(*idx_map)[size_t(i)]] += g[i];
        });
    }
    return out;
}
}  // namespace

Tensor space_to_depth(const Tensor& x, int p) { return block_permute(x, p, true); }
Tensor depth_to_space(const Tensor& x, int p) { return block_permute(x, p, false); }

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check_rank(x, 4, "add_channel_bias");
    check_rank(b, 2, "add_channel_bias bias");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (b.dim(0) != N || b.dim(1) != C)
        tensor_error("add_channel_bias: bias must be N×C, got " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x, &b}));
    const float* px = x.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float bv = pb[n * C + c];
            const float* xr = px + (n * C + c) * H * W;
            float* orow = po + (n * C + c) * H * W;
            for (int64_t j = 0; j < H * W; ++j) orow[j] = xr[j] + bv;
        }
    if (out.requires_grad()) {
        Tensor cx = x, cb = b, co = out;
        tape().record([cx, cb, co, N, C, H, W]() mutable {
            const float* g = co.grad();
            if (cx.requires_grad()) {
                float* gx = cx.grad();
                for (int64_t i = 0; i < co.numel(); ++i) gx[i] += g[i];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        double acc = 0.0;
                        const float* grow = g + (n * C + c) * H * W;
                        for (int64_t j = 0; j < H * W; ++j) acc += grow[j];
                        gb[n * C + c] += float(acc);
                    }
            }
        });
    }
    return out;
}

Tensor nchw_to_tokens(const Tensor& x) {
    check_rank(x, 4, "nchw_to_tokens");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::zeros({N, H * W, C}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t j = 0; j < H * W; ++j)
                po[(n * H * W + j) * C + c] = px[(n * C + c) * H * W + j];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, C, H, W]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t j = 0; j < H * W; ++j)
                        gx[(n * C + c) * H * W + j] += g[(n * H * W + j) * C + c];
        });
    }
    return out;
}

Tensor tokens_to_nchw(const Tensor& x, int64_t h, int64_t w) {
    check_rank(x, 3, "tokens_to_nchw");
    int64_t N = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (T != h * w) tensor_error("tokens_to_nchw: token count does not equal h*w");
    Tensor out = Tensor::zeros({N, C, h, w}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t j = 0; j < T; ++j)
                po[(n * C + c) * T + j] = px[(n * T + j) * C + c];
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, T, C]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t j = 0; j < T; ++j)
                        gx[(n * T + j) * C + c] += g[(n * C + c) * T + j];
        });
    }
    return out;
}

namespace {
Tensor concat_axis(const Tensor& a, const Tensor& b, int axis, const char* op) {
    if (a.rank() != b.rank()) tensor_error(std::string(op) + ": rank mismatch");
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            tensor_error(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ off the concat axis");
    std::vector<int64_t> oshape = a.shape();
    oshape[size_t(axis)] += b.dim(axis);
    // outer = product of extents before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    int64_t arun = a.dim(axis) * inner, brun = b.dim(axis) * inner;
    Tensor out = Tensor::zeros(oshape, want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t u = 0; u < outer; ++u) {
        std::memcpy(po + u * (arun + brun), pa + u * arun, size_t(arun) * 4);
        std::memcpy(po + u * (arun + brun) + arun, pb + u * brun, size_t(brun) * 4);
    }
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co, outer, arun, brun]() mutable {
            const float* g = co.grad();
            if (ca.requires_grad()) {
                float* ga = ca.grad();
                for (int64_t u = 0; u < outer; ++u)
                    for (int64_t j = 0; j < arun; ++j)
                        ga[u * arun + j] += g[u * (arun + brun) + j];
            }
            if (cb.requires_grad()) {
                float* gb = cb.grad();
                for (int64_t u = 0; u < outer; ++u)
                    for (int64_t j = 0; j < brun; ++j)
                        gb[u * brun + j] += g[u * (arun + brun) + arun + j];
            }
        });
    }
    return out;
}
}  // namespace

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_rank(a, 4, "concat_channels");
    return concat_axis(a, b, 1, "concat_channels");
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1) tensor_error("concat_batch: rank must be >= 1");
    return concat_axis(a, b, 0, "concat_batch");
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    if (x.rank() < 1) tensor_error("gather_rows: rank must be >= 1");
    int64_t rows = x.dim(0), stride = x.numel() / rows;
    for (int64_t i : idx)
        if (i < 0 || i >= rows) tensor_error("gather_rows: index out of range");
    std::vector<int64_t> oshape = x.shape();
    oshape[0] = int64_t(idx.size());
    Tensor out = Tensor::zeros(oshape, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(po + int64_t(i) * stride, px + idx[i] * stride, size_t(stride) * 4);
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        std::vector<int64_t> ic = idx;
        tape().record([cx, co, ic, stride]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (size_t i = 0; i < ic.size(); ++i)
                for (int64_t j = 0; j < stride; ++j)
                    gx[ic[i] * stride + j] += g[int64_t(i) * stride + j];
        });
    }
    return out;
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    check_rank(a, 3, "concat_tokens");
    return concat_axis(a, b, 1, "concat_tokens");
}

Tensor concat_width(const Tensor& a, const Tensor& b) {
    check_rank(a, 4, "concat_width");
    return concat_axis(a, b, 3, "concat_width");
}

Tensor slice_width(const Tensor& x, int64_t w0, int64_t w1) {
    check_rank(x, 4, "slice_width");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (w0 < 0 || w1 > W || w0 >= w1) tensor_error("slice_width: bad range");
    int64_t OW = w1 - w0;
    Tensor out = Tensor::zeros({N, C, H, OW}, want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < N * C * H; ++r)
        std::memcpy(po + r * OW, px + r * W + w0, size_t(OW) * 4);
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, N, C, H, W, OW, w0]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t r = 0; r < N * C * H; ++r)
                for (int64_t j = 0; j < OW; ++j) gx[r * W + w0 + j] += g[r * OW + j];
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) tensor_error("softmax_lastdim: rank must be >= 1");
    int64_t D = x.dim(x.rank() - 1);
    if (D < 1) tensor_error("softmax_lastdim: empty last axis");
    int64_t R = x.numel() / D;
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x}));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < R; ++r) {
        const float* xr = px + r * D;
        float* orow = po + r * D;
        float mx = xr[0];
        for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
        double sum = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            double e = std::exp(double(xr[d]) - double(mx));
            orow[d] = float(e);
            sum += e;
        }
        double inv = 1.0 / sum;
        for (int64_t d = 0; d < D; ++d) orow[d] = float(orow[d] * inv);
    }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, R, D]() mutable {
            const float* g = co.grad();
            const float* y = co.data();
            float* gx = cx.grad();
            for (int64_t r = 0; r < R; ++r) {
                double dot = 0.0;
                for (int64_t d = 0; d < D; ++d) dot += double(g[r * D + d]) * y[r * D + d];
                for (int64_t d = 0; d < D; ++d)
                    gx[r * D + d] += float(y[r * D + d] * (double(g[r * D + d]) - dot));
            }
        });
    }
    return out;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check_rank(q, 3, "scaled_dot_attention q");
    check_rank(k, 3, "scaled_dot_attention k");
    check_rank(v, 3, "scaled_dot_attention v");
    if (k.dim(1) == 0) tensor_error("scaled_dot_attention: empty key set");
    if (q.dim(0) != k.dim(0) || q.dim(0) != v.dim(0))
        tensor_error("scaled_dot_attention: batch axes disagree");
    if (q.dim(2) != k.dim(2))
        tensor_error("scaled_dot_attention: query/key feature axes disagree");
    if (k.dim(1) != v.dim(1))
        tensor_error("scaled_dot_attention: key/value token axes disagree");
    double scale = 1.0 / std::sqrt(double(q.dim(2)));
    Tensor logits = affine(bmm(q, transpose_last2(k)), 0.0, scale);
    Tensor attn = softmax_lastdim(logits);
    return bmm(attn, v);
}

namespace {
Tensor head_permute(const Tensor& x, int heads, bool splitting) {
    check_rank(x, 3, splitting ? "split_heads" : "merge_heads");
    if (heads < 1) tensor_error("head count must be >= 1");
    int64_t B, T, D;  // output-side extents
    if (splitting) {
        if (x.dim(2) % heads != 0)
            tensor_error("split_heads: feature axis not divisible by head count");
        B = x.dim(0) * heads;
        T = x.dim(1);
        D = x.dim(2) / heads;
    } else {
        if (x.dim(0) % heads != 0)
            tensor_error("merge_heads: batch axis not divisible by head count");
        B = x.dim(0) / heads;
        T = x.dim(1);
        D = x.dim(2) * heads;
    }
    Tensor out = Tensor::zeros({B, T, D}, want_grad({&x}));
    int64_t b0 = splitting ? x.dim(0) : B;
    int64_t dh = splitting ? D : x.dim(2);
    const float* px = x.data();
    float* po = out.data();
    for (int64_t b = 0; b < b0; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < T; ++t)
                for (int64_t d = 0; d < dh; ++d) {
                    int64_t flat = ((b * heads + h) * T + t) * dh + d;       // split layout
                    int64_t packed = (b * T + t) * (heads * dh) + h * dh + d;  // merged layout
                    if (splitting)
                        po[flat] = px[packed];
                    else
                        po[packed] = px[flat];
                }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, heads, b0, T, dh, splitting]() mutable {
            const float* g = co.grad();
            float* gx = cx.grad();
            for (int64_t b = 0; b < b0; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t t = 0; t < T; ++t)
                        for (int64_t d = 0; d < dh; ++d) {
                            int64_t flat = ((b * heads + h) * T + t) * dh + d;
                            int64_t packed = (b * T + t) * (heads * dh) + h * dh + d;
                            if (splitting)
                                gx[packed] += g[flat];
                            else
                                gx[flat] += g[packed];
                        }
        });
    }
    return out;
}
}  // namespace

Tensor split_heads(const Tensor& x, int heads) { return head_permute(x, heads, true); }
Tensor merge_heads(const Tensor& x, int heads) { return head_permute(x, heads, false); }

Tensor sum_all(const Tensor& x) {
    Tensor out = Tensor::zeros({1}, want_grad({&x}));
    double acc = 0.0;
    if (x.numel() == 1) {
        acc = x.precise_item();
    } else {
        const float* px = x.data();
        for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    }
    out.data()[0] = float(acc);
    out.set_precise(acc);
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co]() mutable {
            float g = co.grad()[0];
            float* gx = cx.grad();
            for (int64_t i = 0; i < cx.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    Tensor s = sum_all(x);
    return affine(s, 0.0, 1.0 / double(x.numel()));
}

Tensor l1_distance(const Tensor& a, const Tensor& b, Reduction r) {
    check_same_shape(a, b, "l1_distance");
    Tensor out = Tensor::zeros({1}, want_grad({&a, &b}));
    double acc = 0.0;
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) acc += std::fabs(double(pa[i]) - pb[i]);
    double scale = (r == Reduction::mean) ? 1.0 / double(a.numel()) : 1.0;
    out.data()[0] = float(acc * scale);
    out.set_precise(acc * scale);
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co, scale]() mutable {
            float g = co.grad()[0];
            const float* pa2 = ca.data();
            const float* pb2 = cb.data();
            for (int64_t i = 0; i < ca.numel(); ++i) {
                float s = (pa2[i] > pb2[i]) ? 1.0f : (pa2[i] < pb2[i] ? -1.0f : 0.0f);
                if (ca.requires_grad()) ca.grad()[i] += float(g * scale) * s;
                if (cb.requires_grad()) cb.grad()[i] -= float(g * scale) * s;
            }
        });
    }
    return out;
}

Tensor rows_dot(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "rows_dot");
    check_same_shape(a, b, "rows_dot");
    int64_t N = a.dim(0), D = a.dim(1);
    Tensor out = Tensor::zeros({N}, want_grad({&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        double acc = 0.0;
        for (int64_t d = 0; d < D; ++d) acc += double(pa[n * D + d]) * pb[n * D + d];
        po[n] = float(acc);
        if (N == 1) out.set_precise(acc);
    }
    if (out.requires_grad()) {
        Tensor ca = a, cb = b, co = out;
        tape().record([ca, cb, co, N, D]() mutable {
            const float* g = co.grad();
            const float* pa2 = ca.data();
            const float* pb2 = cb.data();
            for (int64_t n = 0; n < N; ++n) {
                float gv = g[n];
                if (ca.requires_grad())
                    for (int64_t d = 0; d < D; ++d) ca.grad()[n * D + d] += gv * pb2[n * D + d];
                if (cb.requires_grad())
                    for (int64_t d = 0; d < D; ++d) cb.grad()[n * D + d] += gv * pa2[n * D + d];
            }
        });
    }
    return out;
}

Tensor weighted_mean(const Tensor& x, const std::vector<double>& w) {
    check_rank(x, 1, "weighted_mean");
    if (x.dim(0) != int64_t(w.size())) tensor_error("weighted_mean: weight count mismatch");
    int64_t N = x.dim(0);
    Tensor out = Tensor::zeros({1}, want_grad({&x}));
    double acc = 0.0;
    const float* px = x.data();
    for (int64_t i = 0; i < N; ++i) acc += w[size_t(i)] * px[i];
    out.data()[0] = float(acc / double(N));
    out.set_precise(acc / double(N));
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        std::vector<double> wc = w;
        tape().record([cx, co, wc, N]() mutable {
            float g = co.grad()[0];
            float* gx = cx.grad();
            for (int64_t i = 0; i < N; ++i) gx[i] += float(g * wc[size_t(i)] / double(N));
        });
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    check_rank(x, 2, "l2_normalize_rows");
    int64_t N = x.dim(0), D = x.dim(1);
    Tensor out = Tensor::zeros(x.shape(), want_grad({&x}));
    auto inv_norm = std::make_shared<std::vector<double>>(size_t(N));
    const float* px = x.data();
    float* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        double ss = eps;
        for (int64_t d = 0; d < D; ++d) ss += double(px[n * D + d]) * px[n * D + d];
        double inv = 1.0 / std::sqrt(ss);
        (*inv_norm)[size_t(n)] = inv;
        for (int64_t d = 0; d < D; ++d) po[n * D + d] = float(px[n * D + d] * inv);
    }
    if (out.requires_grad()) {
        Tensor cx = x, co = out;
        tape().record([cx, co, inv_norm, N, D]() mutable {
            const float* g = co.grad();
            const float* px2 = cx.data();
            float* gx = cx.grad();
            for (int64_t n = 0; n < N; ++n) {
                double inv = (*inv_norm)[size_t(n)];
                double dot = 0.0;
                for (int64_t d = 0; d < D; ++d) dot += double(g[n * D + d]) * px2[n * D + d];
                double inv3 = inv * inv * inv;
                for (int64_t d = 0; d < D; ++d)
                    gx[n * D + d] += float(g[n * D + d] * inv - px2[n * D + d] * dot * inv3);
            }
        });
    }
    return out;
}

}  // namespace refkv
