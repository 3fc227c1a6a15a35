#pragma once

#include <optional>
#include <string>

#include "attnindex/index_ivf.hpp"
#include "attnindex/index_oodgraph.hpp"
#include "attnindex/types.hpp"

namespace attnindex {

// Gaussian fit of a reference set: the mean and the lower Cholesky
// factor of the shrunk covariance (covariance + lambda I). Distances to
// the fit are Mahalanobis distances.
struct MahalanobisModel {
  uint32_t d = 0;
  std::vector<double> mean;
  std::vector<double> factor;  // row-major d x d, lower triangle

  double distance(std::span<const float> x) const;
};

// shrinkage defaults to 1e-3 * trace(covariance) / d
MahalanobisModel fit_mahalanobis(const VectorSet& reference,
                                 std::optional<double> shrinkage = {});

struct GapReport {
  double q_to_k_mean = 0.0;
  double k_to_k_mean = 0.0;
  double ratio = 0.0;  // q_to_k_mean / k_to_k_mean
};

// Samples `sample` vectors from each set, fits the key distribution on
// the keys left out of the sample, and compares the mean distance of
// the sampled queries against that of the held-out sampled keys.
GapReport mahalanobis_gap(const VectorSet& queries, const VectorSet& keys,
                          uint64_t sample = 5000, uint64_t seed = 0);

// |retrieved ∩ truth| / |truth|, order-insensitive
double recall_at_k(std::span<const uint32_t> retrieved,
                   std::span<const uint32_t> truth);

struct SweepRow {
  std::string index_kind;
  uint32_t param = 0;  // nprobe or ef; 0 for the flat scan
  double recall_at_k = 0.0;
  double scan_fraction = 0.0;
  uint64_t n_queries = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;

  std::string to_csv() const;    // header: index_kind,param,recall_at_k,...
  std::string to_jsonl() const;  // one row object per line
};

struct SweepParams {
  std::string index_kind = "oodgraph";  // "flat" | "ivf" | "oodgraph"
  std::vector<uint32_t> grid;           // nprobe or ef values; unused for flat
  size_t k = 100;
  IVFBuildParams ivf;
  OODGraphBuildParams graph;
  int n_threads = 1;
};

// Builds the requested index over the head's keys (the graph trains on
// the head's prefill queries) and reports, per grid value, the mean
// recall against the flat oracle and the mean fraction of keys scanned
// across the decode queries.
SweepReport recall_sweep(const HeadWorkload& head, const SweepParams& params);

struct MseRow {
  uint64_t k = 0;
  double mse = 0.0;
};

// Mean error of attention restricted to the oracle top-k versus full
// attention over the decode queries, one row per k. A k = n row is
// always appended so the curve ends at zero.
std::vector<MseRow> mse_sweep(const HeadWorkload& head,
                              std::span<const uint64_t> k_grid,
                              int n_threads = 1);

}  // namespace attnindex
