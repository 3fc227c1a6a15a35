#pragma once

#include <filesystem>

#include "attnindex/index.hpp"

namespace attnindex {

enum class EntryStrategy { Medoid, MaxNorm };

// Occlusion rule used when trimming a node's candidate edges to the
// degree cap. Euclidean order-and-occlude is the default: inner-product
// occlusion lets high-norm hub keys suppress nearly every other edge,
// which caps recall well below what the same edge budget can reach.
enum class PruneRule { Euclidean, InnerProduct };

struct OODGraphBuildParams {
  uint32_t k_train = 32;          // exact neighbors per training query
  uint32_t max_degree = 32;       // out-edge cap M
  uint32_t ef_construction = 128; // candidate pool cap during pruning
  // each co-retrieved key proposes edges toward the query's top key and
  // this many immediately higher-ranked co-neighbors; 0 = all higher
  uint32_t edge_window = 8;
  EntryStrategy entry_strategy = EntryStrategy::Medoid;
  PruneRule prune_rule = PruneRule::Euclidean;
  uint32_t default_ef = 128;
};

// Attention-aware navigable graph. Build projects exact query->key KNN
// links into key->key edges (keys co-retrieved by one query link toward
// the better-ranked keys of that query), prunes to max_degree, then
// repairs connectivity so every key is reachable from the entry point.
// The training queries are not stored.
class OODGraph : public SearchIndex {
 public:
  OODGraph(std::shared_ptr<const VectorSet> keys, const VectorSet& train_queries,
           const OODGraphBuildParams& params, int n_threads = 1);

  // deserialization; the blob must match keys
  OODGraph(std::shared_ptr<const VectorSet> keys, const std::string& blob);

  SearchResult search(std::span<const float> q, size_t k, Mask mask = {},
                      std::optional<uint32_t> ef = {}) const override;

  std::string_view kind() const override { return "oodgraph"; }
  uint64_t size() const override { return keys_->n; }
  size_t memory_bytes() const override;

  uint64_t entry_point() const { return entry_point_; }
  uint32_t max_degree_bound() const { return max_degree_; }
  uint32_t degree(uint64_t u) const {
    return uint32_t(offsets_[u + 1] - offsets_[u]);
  }
  std::span<const uint32_t> neighbors(uint64_t u) const {
    return {adjacency_.data() + offsets_[u], degree(u)};
  }

  // count of nodes reachable from the entry point (n after repair)
  uint64_t reachable_count() const;

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<OODGraph> load(std::shared_ptr<const VectorSet> keys,
                                        const std::filesystem::path& path);

 private:
  void build(const VectorSet& train_queries, const OODGraphBuildParams& params,
             int n_threads);
  void from_blob(const std::string& blob);

  uint32_t max_degree_ = 0;
  uint32_t default_ef_ = 128;
  uint64_t entry_point_ = 0;
  std::vector<uint64_t> offsets_;    // n+1 prefix offsets into adjacency_
  std::vector<uint32_t> adjacency_;
};

std::unique_ptr<OODGraph> ood_build(std::shared_ptr<const VectorSet> keys,
                                    const VectorSet& train_queries,
                                    const OODGraphBuildParams& params,
                                    int n_threads = 1);

}  // namespace attnindex
