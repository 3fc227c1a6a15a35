#include "attnindex/attention.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace attnindex {

namespace {

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

void check_query(std::span<const float> q, const VectorSet& keys,
                 const VectorSet& values) {
  if (q.size() != keys.d) throw std::invalid_argument("query dimension mismatch");
  if (keys.n != values.n)
    throw std::invalid_argument("keys and values must have equal n");
}

void check_indices(std::span<const uint32_t> indices, uint64_t n) {
  if (indices.empty()) throw std::invalid_argument("empty index set");
  std::vector<uint32_t> sorted(indices.begin(), indices.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.back() >= n) throw std::invalid_argument("index out of range");
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("duplicate index");
}

}  // namespace

std::vector<double> full_attention(std::span<const float> q, const VectorSet& keys,
                                   const VectorSet& values) {
  check_query(q, keys, values);
  if (keys.n == 0) throw std::invalid_argument("empty context");
  double inv_sqrt_d = 1.0 / std::sqrt(double(keys.d));
  std::vector<double> z(keys.n);
  double zmax = -std::numeric_limits<double>::infinity();
  for (uint64_t i = 0; i < keys.n; ++i) {
    z[i] = dot_f64(q, keys.row(i)) * inv_sqrt_d;
    zmax = std::max(zmax, z[i]);
  }
  std::vector<double> out(values.d, 0.0);
  double denom = 0.0;
  for (uint64_t i = 0; i < keys.n; ++i) {
    double e = std::exp(z[i] - zmax);
    denom += e;
    auto v = values.row(i);
    for (uint32_t j = 0; j < values.d; ++j) out[j] += e * double(v[j]);
  }
  for (double& o : out) o /= denom;
  return out;
}

std::vector<double> sparse_attention(std::span<const float> q, const VectorSet& keys,
                                     const VectorSet& values,
                                     std::span<const uint32_t> indices) {
  check_query(q, keys, values);
  check_indices(indices, keys.n);
  PartialAttention p = partial_attention(q, keys, values, indices);
  return p.out;
}

std::vector<uint32_t> topk_oracle(std::span<const float> q, const VectorSet& keys,
                                  size_t k) {
  if (q.size() != keys.d) throw std::invalid_argument("query dimension mismatch");
  if (k < 1 || k > keys.n) throw std::invalid_argument("k out of range");
  std::vector<double> score(keys.n);
  for (uint64_t i = 0; i < keys.n; ++i) score[i] = dot_f64(q, keys.row(i));
  std::vector<uint32_t> ids(keys.n);
  std::iota(ids.begin(), ids.end(), 0u);
  auto better = [&](uint32_t a, uint32_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + std::ptrdiff_t(k), ids.end(), better);
  ids.resize(k);
  return ids;
}

KVPartition static_partition(uint64_t t, uint64_t s_init, uint64_t s_local) {
  if (t > std::numeric_limits<uint32_t>::max())
    throw std::invalid_argument("context length exceeds id width");
  KVPartition p;
  uint64_t head_end = std::min(s_init, t);
  uint64_t tail_begin = t > s_local ? std::max(t - s_local, head_end) : head_end;
  p.static_set.reserve(size_t(head_end + (t - tail_begin)));
  for (uint64_t i = 0; i < head_end; ++i) p.static_set.push_back(uint32_t(i));
  for (uint64_t i = tail_begin; i < t; ++i) p.static_set.push_back(uint32_t(i));
  p.dynamic_pool.reserve(size_t(tail_begin - head_end));
  for (uint64_t i = head_end; i < tail_begin; ++i)
    p.dynamic_pool.push_back(uint32_t(i));
  return p;
}

PartialAttention partial_attention(std::span<const float> q, const VectorSet& keys,
                                   const VectorSet& values,
                                   std::span<const uint32_t> indices) {
  check_query(q, keys, values);
  if (indices.empty()) throw std::invalid_argument("empty index set");
  double inv_sqrt_d = 1.0 / std::sqrt(double(keys.d));
  std::vector<double> z(indices.size());
  double zmax = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < indices.size(); ++i) {
    z[i] = dot_f64(q, keys.row(indices[i])) * inv_sqrt_d;
    zmax = std::max(zmax, z[i]);
  }
  PartialAttention p;
  p.empty = false;
  p.zmax = zmax;
  p.out.assign(values.d, 0.0);
  double expsum = 0.0;
  for (size_t i = 0; i < indices.size(); ++i) {
    double e = std::exp(z[i] - zmax);
    expsum += e;
    auto v = values.row(indices[i]);
    for (uint32_t j = 0; j < values.d; ++j) p.out[j] += e * double(v[j]);
  }
  for (double& o : p.out) o /= expsum;
  p.expsum = expsum;
  return p;
}

PartialAttention empty_partial(uint32_t d) {
  PartialAttention p;
  p.out.assign(d, 0.0);
  return p;
}

std::pair<double, double> merge_gammas(const PartialAttention& pw,
                                       const PartialAttention& po) {
  if (pw.empty && po.empty)
    throw std::invalid_argument("empty attention support");
  if (pw.empty) return {0.0, 1.0};
  if (po.empty) return {1.0, 0.0};
  double zref = std::max(pw.zmax, po.zmax);
  double ew = std::exp(pw.zmax - zref) * pw.expsum;
  double eo = std::exp(po.zmax - zref) * po.expsum;
  double denom = ew + eo;
  return {ew / denom, eo / denom};
}

std::vector<double> merge(const PartialAttention& pw, const PartialAttention& po) {
  auto [gw, go] = merge_gammas(pw, po);
  assert(std::abs(gw + go - 1.0) <= 1e-6);
  if (pw.empty) return po.out;
  if (po.empty) return pw.out;
  std::vector<double> out(pw.out.size());
  for (size_t j = 0; j < out.size(); ++j) out[j] = gw * pw.out[j] + go * po.out[j];
  return out;
}

double mse(std::span<const double> approx, std::span<const double> exact) {
  if (approx.size() != exact.size())
    throw std::invalid_argument("mse dimension mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < approx.size(); ++i) {
    double diff = approx[i] - exact[i];
    acc += diff * diff;
  }
  return acc / double(approx.size());
}

}  // namespace attnindex
