#include "attnindex/diagnostics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "attnindex/attention.hpp"
#include "attnindex/index_flat.hpp"
#include "attnindex/util.hpp"

namespace attnindex {

namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatrixRM to_matrix(const VectorSet& s) {
  MatrixRM m(s.n, s.d);
  for (uint64_t i = 0; i < s.n; ++i) {
    auto row = s.row(i);
    for (uint32_t j = 0; j < s.d; ++j) m(i, j) = row[j];
  }
  return m;
}

// first `count` entries of a seeded random permutation of [0, n)
std::vector<uint32_t> sample_indices(uint64_t n, uint64_t count, Rng& rng) {
  std::vector<uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  for (uint64_t i = 0; i < count; ++i) {
    const uint64_t j = i + rng.uniform_index(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

MahalanobisModel fit_mahalanobis(const VectorSet& reference,
                                 std::optional<double> shrinkage) {
  if (reference.n < 2)
    throw std::invalid_argument("reference needs at least 2 vectors");
  const uint32_t d = reference.d;
  MatrixRM x = to_matrix(reference);
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = x.transpose() * x / double(reference.n - 1);

  const double lambda =
      shrinkage ? *shrinkage : 1e-3 * cov.trace() / double(d);
  if (lambda < 0) throw std::invalid_argument("shrinkage must be >= 0");
  cov.diagonal().array() += lambda;

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "covariance factorization failed, increase shrinkage");
  Eigen::MatrixXd L = llt.matrixL();
  for (uint32_t i = 0; i < d; ++i)
    if (!(L(i, i) > 0.0) || !std::isfinite(L(i, i)))
      throw std::runtime_error(
          "covariance factorization failed, increase shrinkage");

  MahalanobisModel model;
  model.d = d;
  model.mean.assign(mean.data(), mean.data() + d);
  model.factor.assign(size_t(d) * d, 0.0);
  for (uint32_t i = 0; i < d; ++i)
    for (uint32_t j = 0; j <= i; ++j) model.factor[size_t(i) * d + j] = L(i, j);
  return model;
}

double MahalanobisModel::distance(std::span<const float> x) const {
  if (x.size() != d) throw std::invalid_argument("dimension mismatch");
  // solve L y = (x - mean); the squared distance is |y|^2
  std::vector<double> y(d);
  double acc = 0.0;
  for (uint32_t i = 0; i < d; ++i) {
    double s = double(x[i]) - mean[i];
    const double* row = factor.data() + size_t(i) * d;
    for (uint32_t j = 0; j < i; ++j) s -= row[j] * y[j];
    y[i] = s / row[i];
    acc += y[i] * y[i];
  }
  return std::sqrt(acc);
}

GapReport mahalanobis_gap(const VectorSet& queries, const VectorSet& keys,
                          uint64_t sample, uint64_t seed) {
  if (sample < 1) throw std::invalid_argument("sample must be >= 1");
  if (sample > queries.n || sample > keys.n)
    throw std::invalid_argument("sample exceeds set size");
  if (queries.d != keys.d) throw std::invalid_argument("dimension mismatch");

  Rng q_rng(mix_seed(seed, 11));
  Rng k_rng(mix_seed(seed, 12));
  const auto q_idx = sample_indices(queries.n, sample, q_rng);
  const auto k_idx = sample_indices(keys.n, sample, k_rng);

  std::vector<uint8_t> held_out(keys.n, 0);
  for (uint32_t id : k_idx) held_out[id] = 1;
  VectorSet fit_set(Role::Key, keys.n - sample, keys.d);
  uint64_t w = 0;
  for (uint64_t i = 0; i < keys.n; ++i) {
    if (held_out[i]) continue;
    auto src = keys.row(i);
    std::copy(src.begin(), src.end(), fit_set.row_mut(w++).begin());
  }
  const MahalanobisModel model = fit_mahalanobis(fit_set);

  GapReport rep;
  for (uint32_t id : q_idx) rep.q_to_k_mean += model.distance(queries.row(id));
  for (uint32_t id : k_idx) rep.k_to_k_mean += model.distance(keys.row(id));
  rep.q_to_k_mean /= double(sample);
  rep.k_to_k_mean /= double(sample);
  rep.ratio = rep.q_to_k_mean / rep.k_to_k_mean;
  return rep;
}

double recall_at_k(std::span<const uint32_t> retrieved,
                   std::span<const uint32_t> truth) {
  if (truth.empty()) throw std::invalid_argument("empty truth");
  std::vector<uint32_t> sorted(truth.begin(), truth.end());
  std::sort(sorted.begin(), sorted.end());
  size_t hits = 0;
  for (uint32_t id : retrieved)
    if (std::binary_search(sorted.begin(), sorted.end(), id)) ++hits;
  return double(hits) / double(truth.size());
}

SweepReport recall_sweep(const HeadWorkload& head, const SweepParams& p) {
  const VectorSet& dq = head.decode_queries;
  const uint64_t n = head.keys->n;
  const uint64_t nq = dq.n;
  if (nq == 0) throw std::invalid_argument("no decode queries");
  if (p.k < 1 || p.k > n) throw std::invalid_argument("k out of range");

  FlatIndex flat(head.keys);
  std::vector<std::vector<uint32_t>> truth(nq);
  parallel_for(nq, p.n_threads,
               [&](size_t i) { truth[i] = flat.search(dq.row(i), p.k).ids; });

  SweepReport rep;
  auto add_rows = [&](const SearchIndex& idx, std::span<const uint32_t> grid) {
    for (uint32_t param : grid) {
      std::vector<double> rec(nq), scan(nq);
      parallel_for(nq, p.n_threads, [&](size_t i) {
        auto r = idx.search(dq.row(i), p.k, {},
                            param ? std::optional<uint32_t>(param) : std::nullopt);
        rec[i] = recall_at_k(r.ids, truth[i]);
        scan[i] = double(r.scanned) / double(n);
      });
      SweepRow row;
      row.index_kind = std::string(idx.kind());
      row.param = param;
      row.recall_at_k = std::accumulate(rec.begin(), rec.end(), 0.0) / double(nq);
      row.scan_fraction =
          std::accumulate(scan.begin(), scan.end(), 0.0) / double(nq);
      row.n_queries = nq;
      rep.rows.push_back(std::move(row));
    }
  };

  if (p.index_kind == "flat") {
    const uint32_t no_param[] = {0};
    add_rows(flat, no_param);
    return rep;
  }
  if (p.grid.empty()) throw std::invalid_argument("empty parameter grid");
  for (uint32_t param : p.grid)
    if (param < 1) throw std::invalid_argument("grid values must be >= 1");
  if (p.index_kind == "ivf") {
    auto idx = ivf_build(head.keys, p.ivf);
    add_rows(*idx, p.grid);
  } else if (p.index_kind == "oodgraph") {
    auto idx = ood_build(head.keys, head.prefill_queries, p.graph, p.n_threads);
    add_rows(*idx, p.grid);
  } else {
    throw std::invalid_argument("unknown index kind: " + p.index_kind);
  }
  return rep;
}

std::string SweepReport::to_csv() const {
  std::string out = "index_kind,param,recall_at_k,scan_fraction,n_queries\n";
  for (const auto& r : rows) {
    out += r.index_kind;
    out += ',';
    out += std::to_string(r.param);
    out += ',';
    out += fmt_double(r.recall_at_k);
    out += ',';
    out += fmt_double(r.scan_fraction);
    out += ',';
    out += std::to_string(r.n_queries);
    out += '\n';
  }
  return out;
}

std::string SweepReport::to_jsonl() const {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["index_kind"] = r.index_kind;
    j["param"] = r.param;
    j["recall_at_k"] = r.recall_at_k;
    j["scan_fraction"] = r.scan_fraction;
    j["n_queries"] = r.n_queries;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<MseRow> mse_sweep(const HeadWorkload& head,
                              std::span<const uint64_t> k_grid, int n_threads) {
  const uint64_t n = head.keys->n;
  const VectorSet& dq = head.decode_queries;
  const uint64_t nq = dq.n;
  if (nq == 0) throw std::invalid_argument("no decode queries");

  std::vector<uint64_t> ks(k_grid.begin(), k_grid.end());
  for (uint64_t k : ks)
    if (k < 1 || k > n) throw std::invalid_argument("k out of range");
  ks.push_back(n);
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  // per-query error at every k, averaged afterwards in query order
  std::vector<std::vector<double>> err(ks.size(), std::vector<double>(nq));
  parallel_for(nq, n_threads, [&](size_t qi) {
    auto q = dq.row(qi);
    const auto exact = full_attention(q, *head.keys, *head.values);
    const auto ranking = topk_oracle(q, *head.keys, n);
    for (size_t ki = 0; ki < ks.size(); ++ki) {
      // ascending ids give the same accumulation order as the full pass,
      // so the k = n row is exactly zero
      std::vector<uint32_t> ids(ranking.begin(), ranking.begin() + ks[ki]);
      std::sort(ids.begin(), ids.end());
      const auto approx = sparse_attention(q, *head.keys, *head.values, ids);
      err[ki][qi] = mse(approx, exact);
    }
  });

  std::vector<MseRow> rows(ks.size());
  for (size_t ki = 0; ki < ks.size(); ++ki) {
    rows[ki].k = ks[ki];
    rows[ki].mse =
        std::accumulate(err[ki].begin(), err[ki].end(), 0.0) / double(nq);
  }
  return rows;
}

}  // namespace attnindex
