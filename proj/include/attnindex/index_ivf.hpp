#pragma once

#include "attnindex/index.hpp"

namespace attnindex {

struct IVFBuildParams {
  uint32_t nlist = 0;  // 0 means ceil(sqrt(n))
  uint64_t seed = 0;
  uint32_t iters = 20;
  uint32_t default_nprobe = 8;
};

// Clustering baseline: k-means (Euclidean, k-means++ init) over the
// keys; queries rank centroids by inner product and scan the nprobe
// nearest lists exactly.
class IVFIndex : public SearchIndex {
 public:
  IVFIndex(std::shared_ptr<const VectorSet> keys, const IVFBuildParams& params);

  SearchResult search(std::span<const float> q, size_t k, Mask mask = {},
                      std::optional<uint32_t> nprobe = {}) const override;

  std::string_view kind() const override { return "ivf"; }
  uint64_t size() const override { return keys_->n; }
  size_t memory_bytes() const override;

  uint32_t nlist() const { return nlist_; }
  const std::vector<uint32_t>& list(uint32_t c) const { return lists_[c]; }
  std::span<const float> centroid(uint32_t c) const {
    return {centroids_.data() + size_t(c) * keys_->d, keys_->d};
  }

 private:
  uint32_t nlist_ = 0;
  uint32_t default_nprobe_ = 1;
  std::vector<float> centroids_;            // nlist x d row-major
  std::vector<std::vector<uint32_t>> lists_;  // ascending ids per centroid
};

std::unique_ptr<IVFIndex> ivf_build(std::shared_ptr<const VectorSet> keys,
                                    const IVFBuildParams& params);

}  // namespace attnindex
