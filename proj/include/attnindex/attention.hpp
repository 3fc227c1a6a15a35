#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "attnindex/types.hpp"

namespace attnindex {

// Local attention result over one index set. `out` is already
// normalized by the local exp-sum, so merging only needs the rescaling
// factors derived from (zmax, expsum).
struct PartialAttention {
  std::vector<double> out;
  double zmax = 0.0;
  double expsum = 0.0;
  bool empty = true;
};

struct KVPartition {
  std::vector<uint32_t> static_set;    // sorted ascending
  std::vector<uint32_t> dynamic_pool;  // sorted complement within [0, t)
};

// o = softmax(q K^T / sqrt(d)) V with max-subtracted exponentials and
// 64-bit accumulation. Throws on empty K.
std::vector<double> full_attention(std::span<const float> q, const VectorSet& keys,
                                   const VectorSet& values);

// Softmax renormalized over `indices` only; equals full_attention when
// indices covers every key. Indices must be non-empty, in range and
// duplicate-free.
std::vector<double> sparse_attention(std::span<const float> q, const VectorSet& keys,
                                     const VectorSet& values,
                                     std::span<const uint32_t> indices);

// Ground-truth top-k ids by q.k_i, ties broken toward the lower index.
std::vector<uint32_t> topk_oracle(std::span<const float> q, const VectorSet& keys,
                                  size_t k);

// W = first s_init tokens plus last s_local tokens; the dynamic pool is
// the middle. Covers everything when t <= s_init + s_local.
KVPartition static_partition(uint64_t t, uint64_t s_init, uint64_t s_local);

PartialAttention partial_attention(std::span<const float> q, const VectorSet& keys,
                                   const VectorSet& values,
                                   std::span<const uint32_t> indices);

PartialAttention empty_partial(uint32_t d);

// Rescaling factors (gamma_w, gamma_o) combining two disjoint partials;
// gamma_w + gamma_o = 1 by construction.
std::pair<double, double> merge_gammas(const PartialAttention& pw,
                                       const PartialAttention& po);

// Exact combination: gamma_w * pw.out + gamma_o * po.out. Either side
// may be empty; both empty throws "empty attention support".
std::vector<double> merge(const PartialAttention& pw, const PartialAttention& po);

double mse(std::span<const double> approx, std::span<const double> exact);

}  // namespace attnindex
