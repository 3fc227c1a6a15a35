#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "attnindex/types.hpp"

namespace attnindex {

// Excluded ids, sorted ascending and duplicate-free. Masked ids are
// never returned by a search; indexes may still score them when the
// traversal needs it (the scanned counter reflects that).
struct Mask {
  std::span<const uint32_t> ids;

  bool contains(uint32_t id) const {
    return std::binary_search(ids.begin(), ids.end(), id);
  }
  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

struct SearchResult {
  std::vector<uint32_t> ids;  // ranked by (score desc, id asc)
  std::vector<float> scores;  // matching inner products
  size_t scanned = 0;         // score evaluations performed
  bool truncated = false;     // fewer than k ids were reachable
};

class SearchIndex {
 public:
  virtual ~SearchIndex() = default;

  // `param` overrides the index's search-time knob for this call:
  // nprobe for IVF, ef for the graph; the flat scan has none.
  virtual SearchResult search(std::span<const float> q, size_t k, Mask mask = {},
                              std::optional<uint32_t> param = {}) const = 0;

  virtual std::string_view kind() const = 0;
  virtual uint64_t size() const = 0;          // indexed key count
  virtual size_t memory_bytes() const = 0;    // index structures, keys excluded

  const std::shared_ptr<const VectorSet>& keys() const { return keys_; }

 protected:
  explicit SearchIndex(std::shared_ptr<const VectorSet> keys)
      : keys_(std::move(keys)) {}
  std::shared_ptr<const VectorSet> keys_;
};

// Deterministic top-k selection shared by the scan-style indexes:
// keeps (score desc, id asc) order.
class TopKCollector {
 public:
  TopKCollector(size_t k) : k_(k) {}

  void offer(uint32_t id, double score) {
    if (heap_.size() >= k_) {
      // candidates not beating the worst retained entry never touch the
      // heap; this is the hot path of every scan
      if (k_ == 0 || !better_({score, id}, heap_.front())) return;
      std::pop_heap(heap_.begin(), heap_.end(), better_);
      heap_.back() = {score, id};
      std::push_heap(heap_.begin(), heap_.end(), better_);
      return;
    }
    heap_.emplace_back(score, id);
    std::push_heap(heap_.begin(), heap_.end(), better_);
  }

  // worst retained entry; only meaningful when full() holds
  bool full() const { return heap_.size() >= k_; }
  double worst_score() const { return heap_.front().first; }

  void finish(SearchResult& r) {
    std::sort_heap(heap_.begin(), heap_.end(), better_);
    r.ids.reserve(heap_.size());
    r.scores.reserve(heap_.size());
    for (auto& [score, id] : heap_) {
      r.ids.push_back(id);
      r.scores.push_back(float(score));
    }
  }

 private:
  // std heap with this comparator keeps the WORST element on top
  static bool better(const std::pair<double, uint32_t>& a,
                     const std::pair<double, uint32_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  }
  static constexpr auto better_ = better;

  size_t k_;
  std::vector<std::pair<double, uint32_t>> heap_;
};

}  // namespace attnindex
