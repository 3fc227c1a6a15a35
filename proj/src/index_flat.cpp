#include "attnindex/index_flat.hpp"

#include <stdexcept>

namespace attnindex {

namespace {

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

}  // namespace

FlatIndex::FlatIndex(std::shared_ptr<const VectorSet> keys)
    : SearchIndex(std::move(keys)) {
  if (!keys_ || keys_->n == 0) throw std::invalid_argument("empty keys");
}

SearchResult FlatIndex::search(std::span<const float> q, size_t k, Mask mask,
                               std::optional<uint32_t>) const {
  if (q.size() != keys_->d) throw std::invalid_argument("query dimension mismatch");
  if (keys_->n < mask.size() || k < 1 || k > keys_->n - mask.size())
    throw std::invalid_argument("k out of range after masking");

  TopKCollector top(k);
  size_t mask_pos = 0;
  size_t scanned = 0;
  for (uint32_t id = 0; id < keys_->n; ++id) {
    if (mask_pos < mask.ids.size() && mask.ids[mask_pos] == id) {
      ++mask_pos;
      continue;
    }
    top.offer(id, dot_f64(q, keys_->row(id)));
    ++scanned;
  }
  SearchResult r;
  r.scanned = scanned;
  top.finish(r);
  return r;
}

std::unique_ptr<FlatIndex> flat_build(std::shared_ptr<const VectorSet> keys) {
  return std::make_unique<FlatIndex>(std::move(keys));
}

}  // namespace attnindex
