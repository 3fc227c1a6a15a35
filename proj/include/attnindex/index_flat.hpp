#pragma once

#include "attnindex/index.hpp"

namespace attnindex {

// Exact maximum-inner-product search by linear scan. Also serves as the
// recall ground truth for every other index.
class FlatIndex : public SearchIndex {
 public:
  explicit FlatIndex(std::shared_ptr<const VectorSet> keys);

  SearchResult search(std::span<const float> q, size_t k, Mask mask = {},
                      std::optional<uint32_t> param = {}) const override;

  std::string_view kind() const override { return "flat"; }
  uint64_t size() const override { return keys_->n; }
  size_t memory_bytes() const override { return 0; }
};

std::unique_ptr<FlatIndex> flat_build(std::shared_ptr<const VectorSet> keys);

}  // namespace attnindex
