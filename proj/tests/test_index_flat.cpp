#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <memory>
#include <numeric>

#include "attnindex/attention.hpp"
#include "attnindex/index_flat.hpp"
#include "attnindex/util.hpp"

using namespace attnindex;

namespace {

std::shared_ptr<const VectorSet> random_keys(uint64_t n, uint32_t d, uint64_t seed) {
  auto s = std::make_shared<VectorSet>(Role::Key, n, d);
  Rng rng(seed);
  for (auto& v : s->data) v = float(rng.normal());
  return s;
}

}  // namespace

TEST_CASE("flat search on scaled basis rows") {
  auto keys = std::make_shared<VectorSet>(Role::Key, 4, 4);
  for (uint32_t i = 0; i < 4; ++i) keys->data[i * 4 + i] = float(i + 1);
  FlatIndex idx(keys);
  std::vector<float> q = {0.f, 0.f, 3.f, 0.f};
  auto r = idx.search(q, 1);
  CHECK(r.ids == std::vector<uint32_t>{2});
  CHECK(r.scores[0] == doctest::Approx(9.0f));
  CHECK(r.scanned == 4);
}

TEST_CASE("flat build over a single key returns it") {
  auto keys = random_keys(1, 8, 1);
  auto idx = flat_build(keys);
  auto r = idx->search(keys->row(0), 1);
  CHECK(r.ids == std::vector<uint32_t>{0});
}

TEST_CASE("flat build is idempotent") {
  auto keys = random_keys(128, 16, 2);
  FlatIndex a(keys), b(keys);
  Rng rng(3);
  std::vector<float> q(16);
  for (auto& v : q) v = float(rng.normal());
  auto ra = a.search(q, 10);
  auto rb = b.search(q, 10);
  CHECK(ra.ids == rb.ids);
  CHECK(ra.scores == rb.scores);
}

TEST_CASE("flat scan counter equals unmasked key count") {
  auto keys = random_keys(10000, 8, 4);
  FlatIndex idx(keys);
  std::vector<float> q(8, 0.25f);
  CHECK(idx.search(q, 100).scanned == 10000);

  std::vector<uint32_t> mask = {5, 17, 9999};
  CHECK(idx.search(q, 100, Mask{mask}).scanned == 9997);
}

TEST_CASE("flat masking excludes ids and k range is checked") {
  auto keys = random_keys(16, 4, 5);
  FlatIndex idx(keys);
  std::vector<float> q(4, 1.0f);

  std::vector<uint32_t> mask;
  for (uint32_t i = 0; i < 16; ++i)
    if (i != 11) mask.push_back(i);
  auto r = idx.search(q, 1, Mask{mask});
  CHECK(r.ids == std::vector<uint32_t>{11});
  CHECK(r.scanned == 1);

  CHECK_THROWS_WITH_AS(idx.search(q, 2, Mask{mask}), doctest::Contains("k out of range"),
                       std::invalid_argument);
  CHECK_THROWS_AS(idx.search(q, 0), std::invalid_argument);
  CHECK_THROWS_AS(idx.search(q, 17), std::invalid_argument);
}

TEST_CASE("flat equals the topk oracle on random instances") {
  auto keys = random_keys(4096, 64, 6);
  FlatIndex idx(keys);
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<float> q(64);
    for (auto& v : q) v = float(rng.normal());
    auto r = idx.search(q, 100);
    CHECK(r.ids == topk_oracle(q, *keys, 100));
    CHECK(std::is_sorted(r.scores.rbegin(), r.scores.rend()));
  }
}

TEST_CASE("flat with mask equals the oracle restricted to unmasked ids") {
  auto keys = random_keys(512, 16, 8);
  FlatIndex idx(keys);
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<float> q(16);
    for (auto& v : q) v = float(rng.normal());
    std::vector<uint32_t> mask;
    for (uint32_t i = 0; i < 512; ++i)
      if (rng.uniform() < 0.3) mask.push_back(i);

    auto r = idx.search(q, 50, Mask{mask});

    // restricted oracle built independently from scored ids
    std::vector<std::pair<double, uint32_t>> scored;
    for (uint32_t i = 0; i < 512; ++i) {
      if (std::binary_search(mask.begin(), mask.end(), i)) continue;
      double acc = 0;
      for (uint32_t j = 0; j < 16; ++j)
        acc += double(q[j]) * double(keys->row(i)[j]);
      scored.push_back({-acc, i});
    }
    std::sort(scored.begin(), scored.end());
    for (size_t i = 0; i < 50; ++i) CHECK(r.ids[i] == scored[i].second);
    for (uint32_t id : r.ids) CHECK(!std::binary_search(mask.begin(), mask.end(), id));
  }
}
