#ifndef REFKV_SYNTHFACES_HPP
#define REFKV_SYNTHFACES_HPP

#include <array>
#include <string>
#include <vector>

#include "refkv/identity.hpp"
#include "refkv/refdata.hpp"
#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

// One synthetic identity: a palette and blob/marker geometry drawn from
// quantized grids indexed by mixed-radix digits of the identity seed, so any
// two distinct seeds below the grid capacity differ in at least one quantum
// (hue by 1/12 of a turn, radii and offsets by one grid step).
struct IdentitySpec {
    uint64_t identity_seed = 0;
    std::array<std::array<double, 3>, 3> palette{};  // face, markers, mouth
    double face_rx = 0.36, face_ry = 0.4;
    double eye_dx = 0.13, eye_y = -0.08, eye_r = 0.06;
    double mouth_y = 0.16, mouth_w = 0.2, mouth_h = 0.05;
    // nuisance ranges
    double rot_range_deg = 10.0;
    double gain_lo = 0.96, gain_hi = 1.04;
    double bg_lo = 0.24, bg_hi = 0.28;
    double jitter_px = 1.0;
    double speckle = 0.01;
};

// grid capacity of the identity parameter space
int64_t identity_grid_capacity();

IdentitySpec make_identity_spec(uint64_t identity_seed);

struct NuisanceDraw {
    double rot_deg = 0.0;
    double gain = 1.0;
    double bg = 0.25;
    double jx = 0.0, jy = 0.0;
};

NuisanceDraw draw_nuisance(const IdentitySpec& spec, Rng& rng);

// deterministic 3×S×S render in [0,1]; rng drives only the speckle texture
Tensor render(const IdentitySpec& spec, const NuisanceDraw& nuisance, Rng& rng, int size = 32);

struct Corpus {
    std::vector<std::string> ids;   // "id017_r03"
    std::vector<int> identity;      // ground-truth identity per image
    std::vector<Tensor> images;     // 3×S×S in [0,1]
    EmbeddingSet embeddings;        // toy-embedder rows, unit norm
};

Corpus generate_corpus(int n_identities, int renders_per_identity, Rng& rng,
                       const FaceEmbedder& embedder, int size = 32);

// PPM images plus the RKVT embedding matrix, id list, and a manifest
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// largest intra-identity and smallest inter-identity cosine distance
struct SeparabilityReport {
    double max_intra = 0.0;
    double min_inter = 2.0;
    double mean_intra = 0.0;
    double mean_inter = 0.0;
    double margin() const { return min_inter - max_intra; }
    double calibrated_threshold() const { return 0.5 * (max_intra + min_inter); }
};

SeparabilityReport measure_separability(const Corpus& corpus);

}  // namespace refkv

#endif
