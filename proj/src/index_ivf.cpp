#include "attnindex/index_ivf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "attnindex/util.hpp"

namespace attnindex {

namespace {

using Md = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

Md kmeans_pp_init(const Md& x, uint32_t nlist, Rng& rng) {
  const auto n = x.rows();
  Md cent(nlist, x.cols());
  cent.row(0) = x.row(Eigen::Index(rng.uniform_index(uint64_t(n))));
  Eigen::VectorXd d2 = (x.rowwise() - cent.row(0)).rowwise().squaredNorm();
  for (uint32_t c = 1; c < nlist; ++c) {
    double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      // target in (0, total] so zero-weight (already chosen) rows are skipped
      double target = (1.0 - rng.uniform()) * total;
      double run = 0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        run += d2(i);
        if (run >= target) {
          pick = i;
          break;
        }
      }
    } else {
      // all mass used up (duplicate-heavy data): walk ids round-robin
      pick = Eigen::Index(c % uint32_t(n));
    }
    cent.row(c) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - cent.row(c)).rowwise().squaredNorm());
  }
  return cent;
}

}  // namespace

IVFIndex::IVFIndex(std::shared_ptr<const VectorSet> keys,
                   const IVFBuildParams& params)
    : SearchIndex(std::move(keys)) {
  const uint64_t n = keys_->n;
  const uint32_t d = keys_->d;
  if (n == 0) throw std::invalid_argument("empty keys");
  nlist_ = params.nlist == 0 ? uint32_t(std::ceil(std::sqrt(double(n))))
                             : params.nlist;
  if (nlist_ < 1 || nlist_ > n) throw std::invalid_argument("nlist out of range");
  default_nprobe_ = std::clamp<uint32_t>(params.default_nprobe, 1, nlist_);

  Md x(Eigen::Index(n), d);
  for (uint64_t i = 0; i < n; ++i)
    for (uint32_t j = 0; j < d; ++j) x(Eigen::Index(i), j) = keys_->row(i)[j];

  Rng rng(params.seed);
  Md cent = kmeans_pp_init(x, nlist_, rng);

  std::vector<uint32_t> assign(n, 0);
  Eigen::VectorXd xsq = x.rowwise().squaredNorm();
  for (uint32_t it = 0; it < params.iters; ++it) {
    // assignment by squared euclidean distance, ties to the lower centroid
    Md sim = x * cent.transpose();
    Eigen::VectorXd csq = cent.rowwise().squaredNorm();
    for (uint64_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      uint32_t best_c = 0;
      for (uint32_t c = 0; c < nlist_; ++c) {
        double dist = csq(c) - 2.0 * sim(Eigen::Index(i), c);
        if (dist < best) {
          best = dist;
          best_c = c;
        }
      }
      assign[i] = best_c;
    }

    std::vector<uint64_t> count(nlist_, 0);
    Md sums = Md::Zero(nlist_, d);
    for (uint64_t i = 0; i < n; ++i) {
      sums.row(assign[i]) += x.row(Eigen::Index(i));
      count[assign[i]]++;
    }

    // reseed empty clusters from the largest cluster's farthest member
    for (uint32_t c = 0; c < nlist_; ++c) {
      if (count[c] != 0) continue;
      uint32_t largest = uint32_t(
          std::max_element(count.begin(), count.end()) - count.begin());
      if (count[largest] <= 1) break;
      Eigen::RowVectorXd mean = sums.row(largest) / double(count[largest]);
      double far_d = -1.0;
      uint64_t far_i = 0;
      for (uint64_t i = 0; i < n; ++i) {
        if (assign[i] != largest) continue;
        double dist = (x.row(Eigen::Index(i)) - mean).squaredNorm();
        if (dist > far_d) {
          far_d = dist;
          far_i = i;
        }
      }
      sums.row(largest) -= x.row(Eigen::Index(far_i));
      count[largest]--;
      sums.row(c) = x.row(Eigen::Index(far_i));
      count[c] = 1;
      assign[far_i] = c;
    }

    for (uint32_t c = 0; c < nlist_; ++c)
      if (count[c] > 0) cent.row(c) = sums.row(c) / double(count[c]);
  }

  // final assignment under the final centroids
  {
    Md sim = x * cent.transpose();
    Eigen::VectorXd csq = cent.rowwise().squaredNorm();
    lists_.assign(nlist_, {});
    for (uint64_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      uint32_t best_c = 0;
      for (uint32_t c = 0; c < nlist_; ++c) {
        double dist = csq(c) - 2.0 * sim(Eigen::Index(i), c);
        if (dist < best) {
          best = dist;
          best_c = c;
        }
      }
      lists_[best_c].push_back(uint32_t(i));
    }
  }

  centroids_.resize(size_t(nlist_) * d);
  for (uint32_t c = 0; c < nlist_; ++c)
    for (uint32_t j = 0; j < d; ++j)
      centroids_[size_t(c) * d + j] = float(cent(c, j));
}

SearchResult IVFIndex::search(std::span<const float> q, size_t k, Mask mask,
                              std::optional<uint32_t> nprobe_override) const {
  if (q.size() != keys_->d) throw std::invalid_argument("query dimension mismatch");
  uint32_t nprobe = nprobe_override.value_or(default_nprobe_);
  if (nprobe < 1 || nprobe > nlist_)
    throw std::invalid_argument("nprobe out of range");
  if (k < 1) throw std::invalid_argument("k out of range");

  // rank centroids by inner product, ties toward the lower centroid id
  std::vector<std::pair<double, uint32_t>> ranked(nlist_);
  for (uint32_t c = 0; c < nlist_; ++c)
    ranked[c] = {-dot_f64(q, centroid(c)), c};
  std::partial_sort(ranked.begin(), ranked.begin() + nprobe, ranked.end());

  TopKCollector top(k);
  size_t scanned = 0;
  for (uint32_t p = 0; p < nprobe; ++p) {
    for (uint32_t id : lists_[ranked[p].second]) {
      if (!mask.empty() && mask.contains(id)) continue;
      top.offer(id, dot_f64(q, keys_->row(id)));
      ++scanned;
    }
  }
  SearchResult r;
  r.scanned = scanned;
  top.finish(r);
  r.truncated = r.ids.size() < k;
  return r;
}

size_t IVFIndex::memory_bytes() const {
  size_t bytes = centroids_.size() * sizeof(float);
  for (const auto& l : lists_) bytes += l.size() * sizeof(uint32_t);
  return bytes;
}

std::unique_ptr<IVFIndex> ivf_build(std::shared_ptr<const VectorSet> keys,
                                    const IVFBuildParams& params) {
  return std::make_unique<IVFIndex>(std::move(keys), params);
}

}  // namespace attnindex
