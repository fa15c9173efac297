#include "refkv/refdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "refkv/linalg.hpp"
#include "refkv/manifest.hpp"
#include "refkv/tensor_io.hpp"

namespace refkv {

void save_embedding_set(const EmbeddingSet& e, const std::string& rkvt_path,
                        const std::string& ids_path) {
    if (e.matrix.rank() != 2 || e.matrix.dim(0) != int64_t(e.ids.size()))
        tensor_error("embedding set: one id per matrix row required");
    save_rkvt(e.matrix, rkvt_path);
    std::ofstream os(ids_path);
    if (!os) throw std::runtime_error("cannot open " + ids_path + " for writing");
    for (const auto& id : e.ids) os << id << "\n";
}

EmbeddingSet load_embedding_set(const std::string& rkvt_path, const std::string& ids_path) {
    EmbeddingSet e;
    e.matrix = load_rkvt(rkvt_path);
    if (e.matrix.rank() != 2)
        throw std::runtime_error(rkvt_path + ": embedding matrix must be rank 2");
    std::ifstream is(ids_path);
    if (!is) throw std::runtime_error("cannot open " + ids_path);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) e.ids.push_back(trim(line));
    if (int64_t(e.ids.size()) != e.matrix.dim(0))
        throw std::runtime_error(ids_path + ": id count does not match embedding rows");
    std::set<std::string> seen;
    for (const auto& id : e.ids)
        if (!seen.insert(id).second)
            throw std::runtime_error(ids_path + ": duplicate id '" + id + "'");
    int64_t D = e.matrix.dim(1);
    for (int64_t r = 0; r < e.matrix.dim(0); ++r) {
        double n = 0.0;
        for (int64_t d = 0; d < D; ++d)
            n += double(e.matrix.data()[r * D + d]) * e.matrix.data()[r * D + d];
        if (std::fabs(std::sqrt(n) - 1.0) > 1e-4)
            throw std::runtime_error(rkvt_path + ": embedding row " + std::to_string(r) +
                                     " is not unit length");
    }
    return e;
}

Tensor pairwise_cosine_distance(const EmbeddingSet& e) {
    if (e.ids.empty()) tensor_error("pairwise_cosine_distance: empty embedding set");
    int64_t N = e.matrix.dim(0), D = e.matrix.dim(1);
    Tensor out = Tensor::zeros({N, N});
    const float* m = e.matrix.data();
    for (int64_t a = 0; a < N; ++a) {
        out.data()[a * N + a] = 0.0f;
        for (int64_t b = a + 1; b < N; ++b) {
            double dot = 0.0;
            for (int64_t d = 0; d < D; ++d) dot += double(m[a * D + d]) * m[b * D + d];
            float v = float(1.0 - dot);
            out.data()[a * N + b] = v;
            out.data()[b * N + a] = v;
        }
    }
    return out;
}

namespace {
struct UnionFind {
    std::vector<int64_t> parent;
    explicit UnionFind(int64_t n) : parent(size_t(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int64_t find(int64_t x) {
        while (parent[size_t(x)] != x) {
            parent[size_t(x)] = parent[size_t(parent[size_t(x)])];
            x = parent[size_t(x)];
        }
        return x;
    }
    void unite(int64_t a, int64_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) parent[size_t(b)] = a;  // smaller index wins the label
        else parent[size_t(a)] = b;
    }
};
}  // namespace

IdentityGraph build_identity_graph(const EmbeddingSet& e, double threshold) {
    if (!(threshold >= 0.0) || !(threshold < 2.0))
        throw std::invalid_argument("build_identity_graph: threshold must be in [0,2)");
    IdentityGraph g;
    g.ids = e.ids;
    g.match_threshold = threshold;
    Tensor dist = pairwise_cosine_distance(e);
    int64_t N = e.matrix.dim(0);
    UnionFind uf(N);
    for (int64_t a = 0; a < N; ++a)
        for (int64_t b = a + 1; b < N; ++b)
            if (double(dist.data()[a * N + b]) < threshold) {
                g.edges.emplace_back(a, b);
                uf.unite(a, b);
            }
    g.component.resize(size_t(N));
    for (int64_t v = 0; v < N; ++v) g.component[size_t(v)] = uf.find(v);
    return g;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::excluded: return "excluded";
    }
    throw std::invalid_argument("unknown split");
}

SplitAssignment split_by_identity(const IdentityGraph& graph,
                                  const std::array<double, 3>& ratios, Rng& rng) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::fabs(sum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
        throw std::invalid_argument("split_by_identity: ratios must be nonnegative and sum to 1");

    std::map<int64_t, int64_t> comp_size;
    for (int64_t label : graph.component) ++comp_size[label];

    std::vector<int64_t> labels;  // multi-image components only
    int64_t total = 0;
    for (const auto& [label, size] : comp_size)
        if (size > 1) {
            labels.push_back(label);
            total += size;
        }
    rng.shuffle(labels);

    SplitAssignment out;
    double target[3] = {ratios[0] * double(total), ratios[1] * double(total),
                        ratios[2] * double(total)};
    double assigned[3] = {0, 0, 0};
    for (int64_t label : labels) {
        int best = 0;
        double best_deficit = target[0] - assigned[0];
        for (int s = 1; s < 3; ++s) {
            double deficit = target[s] - assigned[s];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        Split sp = best == 0 ? Split::train : (best == 1 ? Split::val : Split::test);
        out.component_split[label] = sp;
        assigned[best] += double(comp_size[label]);
    }
    out.image_split.resize(graph.component.size(), Split::excluded);
    for (size_t v = 0; v < graph.component.size(); ++v) {
        auto it = out.component_split.find(graph.component[v]);
        if (it != out.component_split.end()) out.image_split[v] = it->second;
    }
    return out;
}

RefList order_references_fps(int64_t target, const std::vector<int64_t>& candidates,
                             const Tensor& dist, const EmbeddingSet& e) {
    if (candidates.empty())
        throw std::invalid_argument("order_references_fps: need at least one candidate");
    int64_t N = dist.dim(0);
    auto d = [&](int64_t a, int64_t b) { return double(dist.data()[a * N + b]); };

    RefList out;
    out.target = target;
    out.target_id = e.ids[size_t(target)];
    std::vector<int64_t> remaining = candidates;
    std::sort(remaining.begin(), remaining.end());

    // seed: the candidate nearest the target
    size_t pick = 0;
    for (size_t i = 1; i < remaining.size(); ++i)
        if (d(remaining[i], target) < d(remaining[pick], target)) pick = i;
    std::vector<int64_t> chosen = {remaining[pick]};
    remaining.erase(remaining.begin() + std::ptrdiff_t(pick));

    while (!remaining.empty()) {
        size_t best = 0;
        double best_min = -1.0;
        for (size_t i = 0; i < remaining.size(); ++i) {
            double mind = 1e30;
            for (int64_t c : chosen) mind = std::min(mind, d(remaining[i], c));
            if (mind > best_min) {  // ties keep the smaller index (scan order)
                best_min = mind;
                best = i;
            }
        }
        chosen.push_back(remaining[best]);
        remaining.erase(remaining.begin() + std::ptrdiff_t(best));
    }
    for (int64_t c : chosen) {
        out.refs.push_back(c);
        out.ref_ids.push_back(e.ids[size_t(c)]);
        out.distances.push_back(d(c, target));
    }
    return out;
}

RefList filter_test_pairs(const RefList& list, double min_dist) {
    RefList out;
    out.target = list.target;
    out.target_id = list.target_id;
    for (size_t i = 0; i < list.refs.size(); ++i) {
        if (list.distances[i] < min_dist) {  // strictly below is dropped
            ++out.dropped;
            continue;
        }
        out.refs.push_back(list.refs[i]);
        out.ref_ids.push_back(list.ref_ids[i]);
        out.distances.push_back(list.distances[i]);
    }
    return out;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double c = mx - mn;
    s = mx <= 0 ? 0 : c / mx;
    if (c <= 0) {
        h = 0;
        return;
    }
    if (mx == r) h = std::fmod((g - b) / c, 6.0);
    else if (mx == g) h = (b - r) / c + 2.0;
    else h = (r - g) / c + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else { r1 = c; b1 = x; }
    double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

Tensor sample_projective(const Tensor& img, const std::array<double, 8>& hinv) {
    // hinv maps output pixel coordinates to source coordinates
    int64_t H = img.dim(1), W = img.dim(2);
    Tensor out = Tensor::zeros(img.shape());
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double den = hinv[6] * double(x) + hinv[7] * double(y) + 1.0;
            double sx = (hinv[0] * double(x) + hinv[1] * double(y) + hinv[2]) / den;
            double sy = (hinv[3] * double(x) + hinv[4] * double(y) + hinv[5]) / den;
            if (sx < -0.5 || sy < -0.5 || sx > double(W) - 0.5 || sy > double(H) - 0.5)
                continue;  // fill 0 outside
            double cx = std::fmin(std::fmax(sx, 0.0), double(W - 1));
            double cy = std::fmin(std::fmax(sy, 0.0), double(H - 1));
            int64_t x0 = int64_t(cx), y0 = int64_t(cy);
            int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            double wx = cx - double(x0), wy = cy - double(y0);
            for (int c = 0; c < 3; ++c) {
                const float* p = img.data() + c * H * W;
                double v = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                           wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
                out.data()[(c * H + y) * W + x] = float(v);
            }
        }
    return out;
}

// homography with h22 = 1 sending (xs[i], ys[i]) to (xd[i], yd[i])
std::array<double, 8> solve_homography(const std::array<double, 4>& xs,
                                       const std::array<double, 4>& ys,
                                       const std::array<double, 4>& xd,
                                       const std::array<double, 4>& yd) {
    std::vector<double> a(64, 0.0), b(8, 0.0);
    for (int i = 0; i < 4; ++i) {
        // xd = (h0 xs + h1 ys + h2) / (h6 xs + h7 ys + 1)
        double* r1 = a.data() + (2 * i) * 8;
        r1[0] = xs[size_t(i)];
        r1[1] = ys[size_t(i)];
        r1[2] = 1;
        r1[6] = -xs[size_t(i)] * xd[size_t(i)];
        r1[7] = -ys[size_t(i)] * xd[size_t(i)];
        b[size_t(2 * i)] = xd[size_t(i)];
        double* r2 = a.data() + (2 * i + 1) * 8;
        r2[3] = xs[size_t(i)];
        r2[4] = ys[size_t(i)];
        r2[5] = 1;
        r2[6] = -xs[size_t(i)] * yd[size_t(i)];
        r2[7] = -ys[size_t(i)] * yd[size_t(i)];
        b[size_t(2 * i + 1)] = yd[size_t(i)];
    }
    std::vector<double> h = solve_linear(a, b, 8);
    return {h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]};
}

}  // namespace

std::vector<Tensor> augment_references(const std::vector<Tensor>& refs, int n_target, Rng& rng,
                                       const AugmentConfig& cfg) {
    if (refs.empty()) throw std::invalid_argument("augment_references: need >= 1 reference");
    for (const Tensor& r : refs)
        if (r.rank() != 3 || r.dim(0) != 3)
            tensor_error("augment_references: references must be 3×H×W images");

    std::vector<Tensor> out;
    for (int i = 0; i < n_target; ++i) {
        const Tensor& src = refs[size_t(i) % refs.size()];  // cyclic repeat
        Tensor img = src.clone();
        int64_t H = img.dim(1), W = img.dim(2);
        int64_t plane = H * W;

        // color jitter: brightness, contrast, saturation, hue (in that order)
        if (cfg.brightness > 0) {
            double f = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness);
            for (int64_t j = 0; j < img.numel(); ++j)
                img.data()[j] = float(std::clamp(double(img.data()[j]) * f, 0.0, 1.0));
        }
        if (cfg.contrast > 0) {
            double f = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
            double mean_gray = 0.0;
            for (int64_t j = 0; j < plane; ++j)
                mean_gray += 0.299 * img.data()[j] + 0.587 * img.data()[plane + j] +
                             0.114 * img.data()[2 * plane + j];
            mean_gray /= double(plane);
            for (int64_t j = 0; j < img.numel(); ++j)
                img.data()[j] = float(std::clamp(
                    (double(img.data()[j]) - mean_gray) * f + mean_gray, 0.0, 1.0));
        }
        if (cfg.saturation > 0) {
            double f = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
            for (int64_t j = 0; j < plane; ++j) {
                double gray = 0.299 * img.data()[j] + 0.587 * img.data()[plane + j] +
                              0.114 * img.data()[2 * plane + j];
                for (int c = 0; c < 3; ++c) {
                    double v = gray + (double(img.data()[c * plane + j]) - gray) * f;
                    img.data()[c * plane + j] = float(std::clamp(v, 0.0, 1.0));
                }
            }
        }
        if (cfg.hue > 0) {
            double dh = rng.uniform(-cfg.hue, cfg.hue);
            for (int64_t j = 0; j < plane; ++j) {
                double h, s, v, r, g, b;
                rgb_to_hsv(img.data()[j], img.data()[plane + j], img.data()[2 * plane + j],
                           h, s, v);
                h = std::fmod(h + dh + 1.0, 1.0);
                hsv_to_rgb(h, s, v, r, g, b);
                img.data()[j] = float(r);
                img.data()[plane + j] = float(g);
                img.data()[2 * plane + j] = float(b);
            }
        }

        // affine: rotation, translation, scale around the image center
        if (cfg.rotate_deg > 0 || cfg.translate > 0 || cfg.scale > 0) {
            double theta = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) * M_PI / 180.0;
            double tx = rng.uniform(-cfg.translate, cfg.translate) * double(W);
            double ty = rng.uniform(-cfg.translate, cfg.translate) * double(H);
            double sc = 1.0 + rng.uniform(-cfg.scale, cfg.scale);
            double cx = double(W - 1) / 2.0, cy = double(H - 1) / 2.0;
            // inverse map: rotate by -theta, scale by 1/sc, untranslate
            double cs = std::cos(theta), sn = std::sin(theta);
            std::array<double, 8> hinv = {cs / sc, sn / sc,
                                          cx - (cs * (cx + tx) + sn * (cy + ty)) / sc,
                                          -sn / sc, cs / sc,
                                          cy - (-sn * (cx + tx) + cs * (cy + ty)) / sc,
                                          0.0, 0.0};
            img = sample_projective(img, hinv);
        }

        // perspective jitter: corners pulled inward by up to scale/2 extents
        if (cfg.perspective_prob > 0 && rng.bernoulli(cfg.perspective_prob)) {
            double dx = cfg.perspective_scale * double(W) / 2.0;
            double dy = cfg.perspective_scale * double(H) / 2.0;
            std::array<double, 4> sx = {0, double(W - 1), double(W - 1), 0};
            std::array<double, 4> sy = {0, 0, double(H - 1), double(H - 1)};
            std::array<double, 4> ex = sx, ey = sy;
            ex[0] += rng.uniform(0, dx);
            ey[0] += rng.uniform(0, dy);
            ex[1] -= rng.uniform(0, dx);
            ey[1] += rng.uniform(0, dy);
            ex[2] -= rng.uniform(0, dx);
            ey[2] -= rng.uniform(0, dy);
            ex[3] += rng.uniform(0, dx);
            ey[3] -= rng.uniform(0, dy);
            // output corner (ex,ey) samples from source corner (sx,sy)
            std::array<double, 8> hinv = solve_homography(ex, ey, sx, sy);
            img = sample_projective(img, hinv);
        }

        if (cfg.hflip_prob > 0 && rng.bernoulli(cfg.hflip_prob)) {
            for (int c = 0; c < 3; ++c)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W / 2; ++x)
                        std::swap(img.data()[(c * H + y) * W + x],
                                  img.data()[(c * H + y) * W + (W - 1 - x)]);
        }
        out.push_back(img);
    }
    rng.shuffle(out);
    return out;
}

}  // namespace refkv
