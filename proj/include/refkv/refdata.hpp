#ifndef REFKV_REFDATA_HPP
#define REFKV_REFDATA_HPP

#include <array>
#include <map>
#include <string>
#include <vector>

#include "refkv/rng.hpp"
#include "refkv/tensor.hpp"

namespace refkv {

struct EmbeddingSet {
    std::vector<std::string> ids;  // unique, row order
    Tensor matrix;                 // N×D, unit-normalized rows
};

// RKVT rank-2 tensor plus a sidecar UTF-8 id list (one id per line)
void save_embedding_set(const EmbeddingSet& e, const std::string& rkvt_path,
                        const std::string& ids_path);
EmbeddingSet load_embedding_set(const std::string& rkvt_path, const std::string& ids_path);

// d(a,b) = 1 - <e_a, e_b>; N×N, zero diagonal, symmetric
Tensor pairwise_cosine_distance(const EmbeddingSet& e);

struct IdentityGraph {
    std::vector<std::string> ids;
    std::vector<std::pair<int64_t, int64_t>> edges;  // strict distance < threshold
    std::vector<int64_t> component;  // per vertex, label = smallest member index
    double match_threshold = 0.4;
};

IdentityGraph build_identity_graph(const EmbeddingSet& e, double threshold = 0.4);

enum class Split { train, val, test, excluded };
std::string to_string(Split s);

struct SplitAssignment {
    std::vector<Split> image_split;              // per vertex index
    std::map<int64_t, Split> component_split;    // per component label
};

// components shuffled by the seeded rng and assigned greedily toward the
// image-count ratios; singleton components (no references) are excluded
SplitAssignment split_by_identity(const IdentityGraph& graph,
                                  const std::array<double, 3>& ratios, Rng& rng);

struct RefList {
    int64_t target = -1;
    std::string target_id;
    std::vector<int64_t> refs;       // candidate indices in FPS order
    std::vector<std::string> ref_ids;
    std::vector<double> distances;   // cosine distance to the target
    int dropped = 0;                 // removed by the test-pair filter
};

// first pick: candidate nearest the target; then repeatedly the candidate
// maximizing its minimum distance to the picked set; ties break to the
// smaller index
RefList order_references_fps(int64_t target, const std::vector<int64_t>& candidates,
                             const Tensor& dist, const EmbeddingSet& e);

// drops references closer than min_dist to the target (boundary retained)
RefList filter_test_pairs(const RefList& list, double min_dist = 0.1);

struct AugmentConfig {
    double brightness = 0.2;
    double contrast = 0.2;
    double saturation = 0.2;
    double hue = 0.02;          // turns of the HSV circle
    double rotate_deg = 2.0;
    double translate = 0.05;    // fraction of the extent
    double scale = 0.05;
    double perspective_scale = 0.2;
    double perspective_prob = 0.5;
    double hflip_prob = 0.5;
};

// repeats the references cyclically to n_target, jitters each copy, and
// shuffles the order; zero-magnitude stages are skipped bitwise
std::vector<Tensor> augment_references(const std::vector<Tensor>& refs, int n_target, Rng& rng,
                                       const AugmentConfig& cfg = {});

}  // namespace refkv

#endif
