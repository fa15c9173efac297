#ifndef REFKV_EVALBENCH_HPP
#define REFKV_EVALBENCH_HPP

#include <optional>
#include <string>
#include <vector>

#include "refkv/identity.hpp"
#include "refkv/tensor.hpp"
#include "refkv/unet.hpp"

namespace refkv {

// cosine similarity of recognition embeddings, in [-1, 1]
double ids_metric(const Tensor& x, const Tensor& x_star, const FaceEmbedder& embedder);

// Fréchet distance |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) between
// Gaussians fitted to the two feature sets (N×D and M×D); covariances are
// regularized by +1e-6 I before the symmetric-eigendecomposition square root
double fid(const Tensor& features_a, const Tensor& features_b);

// peak signal-to-noise ratio in dB over [0,1] images, capped at 99
double psnr(const Tensor& x, const Tensor& x_star);

// masked L1: mean |x - x*| over mask > 0.5 pixels (the externally-supplied
// face-region hook); an all-ones mask reproduces the global L1
double masked_metric(const Tensor& x, const Tensor& x_star, const Tensor& mask);

struct MetricRow {
    std::string id;
    double ids = 0.0;
    double psnr = 0.0;
    std::optional<double> masked;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    double ids_mean = 0.0, ids_std = 0.0;
    double psnr_mean = 0.0, psnr_std = 0.0;
    std::optional<double> masked_mean;
    void finalize();             // recomputes aggregates from the rows
    std::string to_tsv() const;  // UTF-8 TSV, absent metrics leave columns out
};

struct BenchRow {
    std::string mechanism;
    double wall_seconds = 0.0;
    int64_t unet_passes = 0;
    int64_t extract_passes = 0;
    int64_t attention_token_units = 0;
    double flops_estimate = 0.0;
    int64_t peak_alloc_bytes = 0;
    bool over_budget = false;
    bool pass_count_law_ok = false;
};

struct BenchReport {
    int steps = 0;
    int n_refs = 0;
    uint64_t seed = 0;
    std::vector<BenchRow> rows;
    std::string to_tsv() const;
    std::string summary() const;
    const BenchRow& row(const std::string& mechanism) const;
};

// One full guided sample per mechanism under identical seeds, with counter
// and wall-time capture. Asserts the pass-count law: cachekv runs
// N_ref + 2S passes; the others run 2S, with spatial-concat at (1+N_ref)×
// attention token load. Allocation above the budget is recorded, not fatal.
BenchReport bench_mechanisms(const std::vector<UNetConfig>& model_configs, int steps,
                             int n_refs, Rng& rng,
                             int64_t alloc_budget_bytes = int64_t(off_t(1) << 33));

}  // namespace refkv

#endif
