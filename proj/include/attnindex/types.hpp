#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnindex {

enum class Role : uint8_t { Query = 0, Key = 1, Value = 2 };

const char* role_name(Role r);

// n x d row-major matrix of f32 vectors with a role tag. Immutable by
// convention once filled; safe to read from any number of threads.
struct VectorSet {
  Role role = Role::Query;
  uint64_t n = 0;
  uint32_t d = 1;
  std::vector<float> data;

  VectorSet() = default;
  VectorSet(Role r, uint64_t n_, uint32_t d_)
      : role(r), n(n_), d(d_), data(n_ * d_, 0.0f) {}

  std::span<const float> row(uint64_t i) const {
    return {data.data() + i * d, d};
  }
  std::span<float> row_mut(uint64_t i) { return {data.data() + i * d, d}; }

  // n >= 0, d >= 1, data length n*d, all entries finite
  void validate() const;
};

struct WorkloadSpec {
  uint64_t n_ctx = 8192;
  uint32_t d_model = 256;
  uint32_t d_head = 128;
  uint32_t n_heads = 1;
  uint32_t n_kv_groups = 1;
  uint64_t seed = 7;
  double ood_strength = 2.0;
  double concentration = 12.0;
  uint64_t n_decode = 256;

  // throws std::invalid_argument naming the offending field
  void validate() const;
};

// Per-head bundle. Keys/values are shared_ptr so heads in one GQA group
// reference a single storage instance.
struct HeadWorkload {
  uint32_t head_id = 0;
  uint32_t kv_group_id = 0;
  VectorSet prefill_queries;
  std::shared_ptr<const VectorSet> keys;
  std::shared_ptr<const VectorSet> values;
  VectorSet decode_queries;
};

}  // namespace attnindex
