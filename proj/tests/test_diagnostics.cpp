#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "attnindex/diagnostics.hpp"
#include "attnindex/util.hpp"
#include "attnindex/workload.hpp"

using namespace attnindex;

namespace {

VectorSet gaussian_set(Role role, uint64_t n, uint32_t d, uint64_t seed) {
  VectorSet s(role, n, d);
  Rng rng(seed);
  for (auto& v : s.data) v = float(rng.normal());
  return s;
}

double euclid(std::span<const float> x, const std::vector<double>& mean) {
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double t = double(x[i]) - mean[i];
    acc += t * t;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("distance at the fitted mean is zero") {
  auto ref = gaussian_set(Role::Key, 2000, 4, 1);
  auto model = fit_mahalanobis(ref);
  std::vector<float> at_mean(4);
  for (int j = 0; j < 4; ++j) at_mean[j] = float(model.mean[j]);
  // the cast to f32 moves the point slightly off the mean
  CHECK(model.distance(at_mean) < 1e-4);
  std::vector<float> exact(model.mean.begin(), model.mean.end());
  CHECK(model.distance(exact) == model.distance(at_mean));
}

TEST_CASE("pure shrinkage covariance reduces to euclidean distance") {
  // identical reference points: the sample covariance is zero, so the
  // fitted matrix is exactly lambda I
  VectorSet ref(Role::Key, 8, 3);
  for (uint64_t i = 0; i < 8; ++i) {
    auto r = ref.row_mut(i);
    r[0] = 2.0f;
    r[1] = -1.0f;
    r[2] = 0.5f;
  }
  auto model = fit_mahalanobis(ref, 1.0);
  const std::vector<float> x = {3.0f, 1.0f, 0.5f};
  CHECK(model.distance(x) == doctest::Approx(euclid(x, model.mean)).epsilon(1e-12));

  SUBCASE("zero shrinkage on a rank-deficient fit fails loudly") {
    CHECK_THROWS_WITH_AS(fit_mahalanobis(ref, 0.0),
                         "covariance factorization failed, increase shrinkage",
                         std::runtime_error);
  }
}

TEST_CASE("two-dimensional distances match an explicit matrix inverse") {
  VectorSet ref(Role::Key, 5, 2);
  const float pts[5][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}, {2, 3}};
  for (int i = 0; i < 5; ++i)
    std::copy(pts[i], pts[i] + 2, ref.row_mut(i).begin());
  const double lambda = 0.01;
  auto model = fit_mahalanobis(ref, lambda);

  // sample moments computed independently of the fit
  double mx = 0, my = 0;
  for (auto& p : pts) mx += p[0], my += p[1];
  mx /= 5, my /= 5;
  double sxx = 0, syy = 0, sxy = 0;
  for (auto& p : pts) {
    sxx += (p[0] - mx) * (p[0] - mx);
    syy += (p[1] - my) * (p[1] - my);
    sxy += (p[0] - mx) * (p[1] - my);
  }
  const double a = sxx / 4 + lambda, d = syy / 4 + lambda, b = sxy / 4;
  const double det = a * d - b * b;

  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    const std::vector<float> x = {float(rng.normal() * 2), float(rng.normal() * 2)};
    const double dx = double(x[0]) - mx, dy = double(x[1]) - my;
    const double quad = (dx * dx * d - 2 * dx * dy * b + dy * dy * a) / det;
    CHECK(model.distance(x) == doctest::Approx(std::sqrt(quad)).epsilon(1e-10));
  }
}

TEST_CASE("distances are invariant under rotation plus uniform scaling") {
  const uint32_t d = 6;
  auto ref = gaussian_set(Role::Key, 400, d, 11);
  // correlate the coordinates so the covariance is not near-spherical
  for (uint64_t i = 0; i < ref.n; ++i) {
    auto r = ref.row_mut(i);
    r[1] += 0.8f * r[0];
    r[3] -= 0.5f * r[2];
  }
  auto queries = gaussian_set(Role::Query, 10, d, 12);
  const double lambda = 1e-3;
  auto base = fit_mahalanobis(ref, lambda);

  Eigen::MatrixXd rnd(d, d);
  Rng rng(13);
  for (uint32_t i = 0; i < d; ++i)
    for (uint32_t j = 0; j < d; ++j) rnd(i, j) = rng.normal();
  const Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(rnd)
                                  .householderQ();
  const double scale = 1.7;
  Eigen::VectorXd shift(d);
  for (uint32_t i = 0; i < d; ++i) shift(i) = rng.normal();

  auto transform = [&](const VectorSet& in) {
    VectorSet out(in.role, in.n, in.d);
    for (uint64_t i = 0; i < in.n; ++i) {
      auto src = in.row(i);
      Eigen::VectorXd x(d);
      for (uint32_t j = 0; j < d; ++j) x(j) = src[j];
      Eigen::VectorXd y = scale * (rot * x) + shift;
      for (uint32_t j = 0; j < d; ++j) out.row_mut(i)[j] = float(y(j));
    }
    return out;
  };
  auto ref_t = transform(ref);
  auto queries_t = transform(queries);
  // the shrinkage term scales with the transform: A A^T = scale^2 I
  auto moved = fit_mahalanobis(ref_t, lambda * scale * scale);

  for (uint64_t i = 0; i < queries.n; ++i) {
    const double before = base.distance(queries.row(i));
    const double after = moved.distance(queries_t.row(i));
    CHECK(after == doctest::Approx(before).epsilon(1e-4));
  }
}

TEST_CASE("gap of a set against itself is flat") {
  auto keys = gaussian_set(Role::Key, 4096, 16, 21);
  VectorSet queries = keys;
  queries.role = Role::Query;
  auto rep = mahalanobis_gap(queries, keys, 512, 3);
  CHECK(rep.ratio == doctest::Approx(rep.q_to_k_mean / rep.k_to_k_mean));
  CHECK(rep.ratio > 0.9);
  CHECK(rep.ratio < 1.1);
}

TEST_CASE("query-key gap tracks the workload's projection split") {
  WorkloadSpec spec;
  spec.n_ctx = 4096;
  spec.n_decode = 16;
  auto split = generate_workload(spec);
  auto rep =
      mahalanobis_gap(split[0].prefill_queries, *split[0].keys, 1000, 5);
  CHECK(rep.ratio >= 2.0);

  spec.ood_strength = 0.0;
  auto joint = generate_workload(spec);
  auto base =
      mahalanobis_gap(joint[0].prefill_queries, *joint[0].keys, 1000, 5);
  CHECK(base.ratio > 0.9);
  CHECK(base.ratio < 1.1);
  CHECK(rep.ratio > 2.0 * base.ratio);
}

TEST_CASE("gap sampling is seeded and bounded") {
  auto keys = gaussian_set(Role::Key, 600, 8, 31);
  auto queries = gaussian_set(Role::Query, 300, 8, 32);
  auto a = mahalanobis_gap(queries, keys, 200, 9);
  auto b = mahalanobis_gap(queries, keys, 200, 9);
  CHECK(a.q_to_k_mean == b.q_to_k_mean);
  CHECK(a.k_to_k_mean == b.k_to_k_mean);
  auto c = mahalanobis_gap(queries, keys, 200, 10);
  CHECK(a.q_to_k_mean != c.q_to_k_mean);
  CHECK_THROWS_WITH_AS(mahalanobis_gap(queries, keys, 301, 1),
                       "sample exceeds set size", std::invalid_argument);
}

TEST_CASE("recall_at_k counts overlap regardless of order") {
  std::vector<uint32_t> truth(100);
  std::iota(truth.begin(), truth.end(), 0u);
  CHECK(recall_at_k(truth, truth) == 1.0);

  std::vector<uint32_t> disjoint(100);
  std::iota(disjoint.begin(), disjoint.end(), 100u);
  CHECK(recall_at_k(disjoint, truth) == 0.0);

  std::vector<uint32_t> partial;
  for (uint32_t i = 0; i < 73; ++i) partial.push_back(i);
  for (uint32_t i = 0; i < 27; ++i) partial.push_back(1000 + i);
  CHECK(recall_at_k(partial, truth) == 0.73);
  std::reverse(partial.begin(), partial.end());
  CHECK(recall_at_k(partial, truth) == 0.73);
}

TEST_CASE("recall sweep rows cover the grid with exact anchors") {
  WorkloadSpec spec;
  spec.n_ctx = 2048;
  spec.d_model = 64;
  spec.d_head = 32;
  spec.n_decode = 64;
  auto heads = generate_workload(spec);

  SweepParams p;
  p.k = 10;

  SUBCASE("flat scans everything and misses nothing") {
    p.index_kind = "flat";
    auto rep = recall_sweep(heads[0], p);
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.rows[0].index_kind == "flat");
    CHECK(rep.rows[0].param == 0);
    CHECK(rep.rows[0].recall_at_k == 1.0);
    CHECK(rep.rows[0].scan_fraction == 1.0);
    CHECK(rep.rows[0].n_queries == 64);
    CHECK(rep.to_csv() ==
          "index_kind,param,recall_at_k,scan_fraction,n_queries\n"
          "flat,0,1,1,64\n");
  }

  SUBCASE("ivf at nprobe = nlist matches the flat oracle") {
    p.index_kind = "ivf";
    p.ivf.nlist = 32;
    p.ivf.seed = 4;
    p.grid = {1, 4, 32};
    auto rep = recall_sweep(heads[0], p);
    REQUIRE(rep.rows.size() == 3);
    for (size_t i = 1; i < rep.rows.size(); ++i) {
      CHECK(rep.rows[i].recall_at_k >= rep.rows[i - 1].recall_at_k);
      CHECK(rep.rows[i].scan_fraction >= rep.rows[i - 1].scan_fraction);
    }
    CHECK(rep.rows.back().recall_at_k == 1.0);
    CHECK(rep.rows.back().scan_fraction == 1.0);
  }

  SUBCASE("graph with a whole-set beam matches the flat oracle") {
    p.index_kind = "oodgraph";
    p.graph.k_train = 32;
    p.graph.max_degree = 16;
    p.grid = {10, 2048};
    auto rep = recall_sweep(heads[0], p);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].scan_fraction < 0.5);
    CHECK(rep.rows[1].recall_at_k == 1.0);
    CHECK(rep.rows[1].scan_fraction == 1.0);
  }

  SUBCASE("reports are byte-identical across thread counts") {
    p.index_kind = "ivf";
    p.ivf.nlist = 32;
    p.grid = {2, 8};
    auto serial = recall_sweep(heads[0], p);
    p.n_threads = 4;
    auto threaded = recall_sweep(heads[0], p);
    CHECK(serial.to_csv() == threaded.to_csv());
    CHECK(serial.to_jsonl() == threaded.to_jsonl());
  }

  SUBCASE("bad parameters are rejected") {
    p.index_kind = "ivf";
    p.grid = {};
    CHECK_THROWS_WITH_AS(recall_sweep(heads[0], p), "empty parameter grid",
                         std::invalid_argument);
    p.grid = {0};
    CHECK_THROWS_WITH_AS(recall_sweep(heads[0], p), "grid values must be >= 1",
                         std::invalid_argument);
    p.grid = {1};
    p.index_kind = "annoy";
    CHECK_THROWS_WITH_AS(recall_sweep(heads[0], p), "unknown index kind: annoy",
                         std::invalid_argument);
    p.index_kind = "ivf";
    p.k = 4096;
    CHECK_THROWS_WITH_AS(recall_sweep(heads[0], p), "k out of range",
                         std::invalid_argument);
  }
}

TEST_CASE("sweep report serializes to parseable csv and jsonl") {
  SweepReport rep;
  rep.rows.push_back({"ivf", 8, 0.95, 0.1875, 256});
  rep.rows.push_back({"oodgraph", 128, 0.9612, 0.0261, 256});

  CHECK(rep.to_csv() ==
        "index_kind,param,recall_at_k,scan_fraction,n_queries\n"
        "ivf,8,0.95,0.1875,256\n"
        "oodgraph,128,0.9612,0.0261,256\n");

  const std::string jsonl = rep.to_jsonl();
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 2);
  CHECK(jsonl.substr(0, 48) ==
        R"({"index_kind":"ivf","param":8,"recall_at_k":0.95)");
}

TEST_CASE("topk attention error falls with k and vanishes at k = n") {
  WorkloadSpec spec;
  spec.n_ctx = 512;
  spec.d_model = 64;
  spec.d_head = 32;
  spec.n_decode = 32;
  auto heads = generate_workload(spec);

  const std::vector<uint64_t> grid = {1, 4, 16, 64};
  auto rows = mse_sweep(heads[0], grid);
  REQUIRE(rows.size() == 5);  // the k = n row is appended
  CHECK(rows.back().k == 512);
  CHECK(rows.back().mse == 0.0);
  for (size_t i = 1; i < rows.size(); ++i)
    CHECK(rows[i].mse <= rows[i - 1].mse + 1e-12);
  CHECK(rows[0].mse > rows.back().mse);

  SUBCASE("grids are deduplicated and validated") {
    const std::vector<uint64_t> dup = {16, 4, 4, 512};
    auto r = mse_sweep(heads[0], dup);
    REQUIRE(r.size() == 3);
    CHECK(r[0].k == 4);
    CHECK(r[1].k == 16);
    CHECK(r[2].k == 512);

    const std::vector<uint64_t> bad = {1000};
    CHECK_THROWS_WITH_AS(mse_sweep(heads[0], bad), "k out of range",
                         std::invalid_argument);
  }

  SUBCASE("averaging order is thread-count independent") {
    auto serial = mse_sweep(heads[0], grid, 1);
    auto threaded = mse_sweep(heads[0], grid, 4);
    for (size_t i = 0; i < serial.size(); ++i)
      CHECK(serial[i].mse == threaded[i].mse);
  }
}
