#include "refkv/synthfaces.hpp"

#include <cmath>
#include <vector>
#include <filesystem>
#include <stdexcept>

#include "refkv/image_io.hpp"
#include "refkv/manifest.hpp"
#include "refkv/ops.hpp"

namespace refkv {

namespace {

// Face colors are a farthest-point packing of directions on the positive
// color octant: pairwise angular separations stay large, which is the
// geometry a normalized embedding actually resolves. All palettes share one
// brightness so no pair is a scalar multiple of another.
constexpr int kPaletteCapacity = 64;

const std::vector<std::array<double, 3>>& palette_directions() {
    static const std::vector<std::array<double, 3>> dirs = [] {
        // spiral candidates on a pole-avoiding band of the octant
        std::vector<std::array<double, 3>> cand;
        const int n_cand = 512;
        for (int i = 0; i < n_cand; ++i) {
            double u = (double(i) + 0.5) / double(n_cand);
            double ct = 0.05 + 0.90 * u;
            double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
            double phi = (M_PI / 2.0) * std::fmod(double(i) * 0.6180339887498949, 1.0);
            cand.push_back({st * std::cos(phi), st * std::sin(phi), ct});
        }
        auto dot = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
            return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        };
        std::vector<std::array<double, 3>> picked = {cand[0]};
        std::vector<char> used(cand.size(), 0);
        used[0] = 1;
        while (int(picked.size()) < kPaletteCapacity) {
            int best = -1;
            double best_min = -2.0;
            for (size_t i = 0; i < cand.size(); ++i) {
                if (used[i]) continue;
                double min_sep = 2.0;
                for (const auto& p : picked) min_sep = std::min(min_sep, 1.0 - dot(cand[i], p));
                if (min_sep > best_min) {
                    best_min = min_sep;
                    best = int(i);
                }
            }
            used[size_t(best)] = 1;
            picked.push_back(cand[size_t(best)]);
        }
        return picked;
    }();
    return dirs;
}

std::array<double, 3> palette_direction(uint64_t i) {
    return palette_directions()[size_t(i) % size_t(kPaletteCapacity)];
}

}  // namespace

int64_t identity_grid_capacity() { return kPaletteCapacity; }

IdentitySpec make_identity_spec(uint64_t identity_seed) {
    IdentitySpec s;
    s.identity_seed = identity_seed;
    std::array<double, 3> dir = palette_direction(identity_seed % kPaletteCapacity);
    // shared brightness, below 1/gain_hi so illumination never clips
    double mx = std::max({dir[0], dir[1], dir[2]});
    for (int c = 0; c < 3; ++c) s.palette[0][size_t(c)] = dir[size_t(c)] / mx * 0.85;
    // decorative markers and mouth: channel rotations of the face color
    s.palette[1] = {0.3 * s.palette[0][1] / 0.85, 0.3 * s.palette[0][2] / 0.85,
                    0.3 * s.palette[0][0] / 0.85};
    s.palette[2] = {0.55 * s.palette[0][2] / 0.85, 0.55 * s.palette[0][0] / 0.85,
                    0.55 * s.palette[0][1] / 0.85};
    s.face_rx = 0.40;
    s.face_ry = 0.44;
    return s;
}

NuisanceDraw draw_nuisance(const IdentitySpec& spec, Rng& rng) {
    NuisanceDraw d;
    d.rot_deg = spec.rot_range_deg > 0 ? rng.uniform(-spec.rot_range_deg, spec.rot_range_deg)
                                       : 0.0;
    d.gain = spec.gain_hi > spec.gain_lo ? rng.uniform(spec.gain_lo, spec.gain_hi)
                                         : spec.gain_lo;
    d.bg = spec.bg_hi > spec.bg_lo ? rng.uniform(spec.bg_lo, spec.bg_hi) : spec.bg_lo;
    d.jx = spec.jitter_px > 0 ? rng.uniform(-spec.jitter_px, spec.jitter_px) : 0.0;
    d.jy = spec.jitter_px > 0 ? rng.uniform(-spec.jitter_px, spec.jitter_px) : 0.0;
    return d;
}

Tensor render(const IdentitySpec& spec, const NuisanceDraw& n, Rng& rng, int size) {
    Tensor img = Tensor::zeros({3, size, size});
    double cx = (size - 1) / 2.0 + n.jx, cy = (size - 1) / 2.0 + n.jy;
    double cs = std::cos(-n.rot_deg * M_PI / 180.0), sn = std::sin(-n.rot_deg * M_PI / 180.0);
    double S = double(size);

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            // inverse-rotated, centered coordinates in extent fractions
            double dx = (x - cx) / S, dy = (y - cy) / S;
            double ux = cs * dx - sn * dy, uy = sn * dx + cs * dy;

            const std::array<double, 3>* color = nullptr;
            double ex = std::fabs(ux) - spec.eye_dx;
            if ((ux - spec.eye_dx) * (ux - spec.eye_dx) + (uy - spec.eye_y) * (uy - spec.eye_y) <
                    spec.eye_r * spec.eye_r ||
                (ux + spec.eye_dx) * (ux + spec.eye_dx) + (uy - spec.eye_y) * (uy - spec.eye_y) <
                    spec.eye_r * spec.eye_r)
                color = &spec.palette[1];
            else if (std::fabs(ux) < spec.mouth_w && std::fabs(uy - spec.mouth_y) < spec.mouth_h)
                color = &spec.palette[2];
            else if ((ux * ux) / (spec.face_rx * spec.face_rx) +
                         (uy * uy) / (spec.face_ry * spec.face_ry) <
                     1.0)
                color = &spec.palette[0];
            (void)ex;

            for (int c = 0; c < 3; ++c) {
                double v = color ? (*color)[size_t(c)] : n.bg;
                v *= n.gain;
                if (spec.speckle > 0) v += rng.uniform(-spec.speckle, spec.speckle);
                img.data()[(c * size + y) * size + x] = float(std::clamp(v, 0.0, 1.0));
            }
        }
    return img;
}

Corpus generate_corpus(int n_identities, int renders_per_identity, Rng& rng,
                       const FaceEmbedder& embedder, int size) {
    if (n_identities < 1 || renders_per_identity < 1)
        throw std::invalid_argument("generate_corpus: counts must be positive");
    if (int64_t(n_identities) > identity_grid_capacity())
        throw std::invalid_argument("generate_corpus: identity count exceeds the grid capacity " +
                                    std::to_string(identity_grid_capacity()));
    Corpus c;
    for (int id = 0; id < n_identities; ++id) {
        IdentitySpec spec = make_identity_spec(uint64_t(id));
        for (int r = 0; r < renders_per_identity; ++r) {
            NuisanceDraw nd = draw_nuisance(spec, rng);
            c.images.push_back(render(spec, nd, rng, size));
            char buf[32];
            std::snprintf(buf, sizeof buf, "id%03d_r%02d", id, r);
            c.ids.push_back(buf);
            c.identity.push_back(id);
        }
    }
    // embed in batches
    int64_t N = int64_t(c.images.size());
    Tensor batch = Tensor::zeros({N, 3, size, size});
    for (int64_t i = 0; i < N; ++i)
        std::copy(c.images[size_t(i)].data(), c.images[size_t(i)].data() + c.images[size_t(i)].numel(),
                  batch.data() + i * c.images[size_t(i)].numel());
    NoGradGuard ng;
    c.embeddings.matrix = embedder.embed(batch);
    c.embeddings.ids = c.ids;
    return c;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    for (size_t i = 0; i < corpus.ids.size(); ++i)
        save_image01(corpus.images[i], (fs::path(dir) / "images" / (corpus.ids[i] + ".ppm")).string());
    save_embedding_set(corpus.embeddings, (fs::path(dir) / "embeddings.rkvt").string(),
                       (fs::path(dir) / "ids.txt").string());
    int n_ident = corpus.identity.empty()
                      ? 0
                      : *std::max_element(corpus.identity.begin(), corpus.identity.end()) + 1;
    write_kv_file((fs::path(dir) / "manifest.txt").string(),
                  {{"images", std::to_string(corpus.ids.size())},
                   {"identities", std::to_string(n_ident)},
                   {"image_size", std::to_string(corpus.images.empty() ? 0 : int(corpus.images[0].dim(1)))}});
}

Corpus load_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    Corpus c;
    c.embeddings = load_embedding_set((fs::path(dir) / "embeddings.rkvt").string(),
                                      (fs::path(dir) / "ids.txt").string());
    c.ids = c.embeddings.ids;
    for (const auto& id : c.ids) {
        c.images.push_back(load_image01((fs::path(dir) / "images" / (id + ".ppm")).string()));
        // ground-truth identity from the id prefix when present
        int ident = -1;
        if (id.size() >= 5 && id.rfind("id", 0) == 0)
            ident = std::stoi(id.substr(2, 3));
        c.identity.push_back(ident);
    }
    return c;
}

SeparabilityReport measure_separability(const Corpus& corpus) {
    SeparabilityReport rep;
    EmbeddingSet e = corpus.embeddings;
    Tensor d = pairwise_cosine_distance(e);
    int64_t N = d.dim(0);
    double intra_sum = 0, inter_sum = 0;
    int64_t intra_n = 0, inter_n = 0;
    for (int64_t a = 0; a < N; ++a)
        for (int64_t b = a + 1; b < N; ++b) {
            double v = d.data()[a * N + b];
            if (corpus.identity[size_t(a)] == corpus.identity[size_t(b)]) {
                rep.max_intra = std::max(rep.max_intra, v);
                intra_sum += v;
                ++intra_n;
            } else {
                rep.min_inter = std::min(rep.min_inter, v);
                inter_sum += v;
                ++inter_n;
            }
        }
    rep.mean_intra = intra_n ? intra_sum / double(intra_n) : 0.0;
    rep.mean_inter = inter_n ? inter_sum / double(inter_n) : 0.0;
    return rep;
}

}  // namespace refkv
