#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "attnindex/engine.hpp"
#include "attnindex/workload.hpp"

using namespace attnindex;

namespace {

std::vector<HeadWorkload> make_workload(uint64_t n_ctx, uint32_t n_heads,
                                        uint32_t n_groups, uint64_t n_decode,
                                        uint64_t seed = 7) {
  WorkloadSpec spec;
  spec.n_ctx = n_ctx;
  spec.d_model = 64;
  spec.d_head = 32;
  spec.n_heads = n_heads;
  spec.n_kv_groups = n_groups;
  spec.n_decode = n_decode;
  spec.seed = seed;
  return generate_workload(spec);
}

double dot64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

// exact top-k of the dynamic pool, the retrieval target the engine's
// flat configuration must reproduce
std::vector<uint32_t> pool_topk(std::span<const float> q, const VectorSet& keys,
                                const std::vector<uint32_t>& pool, size_t k) {
  std::vector<std::pair<double, uint32_t>> scored;
  scored.reserve(pool.size());
  for (uint32_t id : pool) scored.emplace_back(-dot64(q, keys.row(id)), id);
  std::partial_sort(scored.begin(), scored.begin() + k, scored.end());
  std::vector<uint32_t> ids(k);
  for (size_t i = 0; i < k; ++i) ids[i] = scored[i].second;
  return ids;
}

}  // namespace

TEST_CASE("window covering the whole context degrades to exact attention") {
  auto heads = make_workload(600, 2, 1, 4);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::Flat;
  auto state = engine_init(heads, cfg);

  for (const auto& hs : state.heads) {
    CHECK(hs.partition.dynamic_pool.empty());
    CHECK(hs.partition.static_set.size() == 600);
  }
  auto run = decode_run(state, 4);
  CHECK(run.summary.total_scanned == 0);
  CHECK(run.summary.mean_scan_fraction == 0.0);
  for (const auto& e : run.trace.entries) {
    CHECK(e.omega.empty());
    const auto& hs = state.heads[e.head];
    const auto exact = full_attention(state.decode_queries[e.head].row(e.step),
                                      *hs.keys, *hs.values);
    CHECK(e.out == exact);  // one partial over everything, no rescaling
  }
}

TEST_CASE("flat retrieval over the whole pool reproduces full attention") {
  auto heads = make_workload(2048, 2, 2, 16);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::Flat;
  cfg.top_k = 2048 - 640;  // the entire dynamic pool
  cfg.compute_reference = true;
  auto state = engine_init(heads, cfg);
  auto run = decode_run(state, 16);

  CHECK(run.trace.entries.size() == 32);
  for (const auto& e : run.trace.entries) {
    REQUIRE(e.mse.has_value());
    CHECK(*e.mse <= 1e-20);
    CHECK(e.omega.size() == 2048 - 640);
    CHECK(e.scanned == 2048 - 640);
  }
  CHECK(run.summary.max_mse <= 1e-20);
  CHECK(run.summary.mean_scan_fraction == 1.0);
}

TEST_CASE("flat retrieval at top-100 equals the oracle union attention") {
  auto heads = make_workload(2048, 2, 1, 8);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::Flat;
  cfg.top_k = 100;
  auto state = engine_init(heads, cfg);
  auto run = decode_run(state, 8);

  for (const auto& e : run.trace.entries) {
    const auto& hs = state.heads[e.head];
    auto q = state.decode_queries[e.head].row(e.step);

    auto want = pool_topk(q, *hs.keys, hs.partition.dynamic_pool, 100);
    auto got = e.omega;
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    CHECK(got == want);

    std::vector<uint32_t> support(hs.partition.static_set.begin(),
                                  hs.partition.static_set.end());
    support.insert(support.end(), got.begin(), got.end());
    std::sort(support.begin(), support.end());
    const auto direct = sparse_attention(q, *hs.keys, *hs.values, support);
    REQUIRE(e.out.size() == direct.size());
    for (size_t j = 0; j < direct.size(); ++j)
      CHECK(std::abs(e.out[j] - direct[j]) <= 1e-12 * (1.0 + std::abs(direct[j])));
  }
}

TEST_CASE("retrieved sets stay inside the pool and off the static set") {
  auto heads = make_workload(2048, 2, 1, 8);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::OODGraph;
  cfg.graph.k_train = 32;
  cfg.graph.max_degree = 16;
  cfg.top_k = 50;
  cfg.search_param = 64;
  auto state = engine_init(heads, cfg);
  auto run = decode_run(state, 8);

  for (const auto& e : run.trace.entries) {
    CHECK(e.omega.size() <= 50);
    const auto& part = state.heads[e.head].partition;
    for (uint32_t id : e.omega) {
      CHECK(std::binary_search(part.dynamic_pool.begin(),
                               part.dynamic_pool.end(), id));
      CHECK_FALSE(std::binary_search(part.static_set.begin(),
                                     part.static_set.end(), id));
    }
  }
}

TEST_CASE("grouped heads share storage but own their indexes") {
  auto heads = make_workload(512, 4, 2, 4);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::OODGraph;
  cfg.graph.k_train = 16;
  cfg.graph.max_degree = 8;
  cfg.s_init = 16;
  cfg.s_local = 64;
  auto state = engine_init(heads, cfg);

  REQUIRE(state.heads.size() == 4);
  // heads 0,1 -> group 0; heads 2,3 -> group 1
  CHECK(state.heads[0].keys.get() == state.heads[1].keys.get());
  CHECK(state.heads[0].values.get() == state.heads[1].values.get());
  CHECK(state.heads[2].keys.get() == state.heads[3].keys.get());
  CHECK(state.heads[0].keys.get() != state.heads[2].keys.get());

  CHECK(state.heads[0].index.get() != state.heads[1].index.get());
  // distinct training queries give distinct graphs even within a group
  auto* g0 = dynamic_cast<OODGraph*>(state.heads[0].index.get());
  auto* g1 = dynamic_cast<OODGraph*>(state.heads[1].index.get());
  REQUIRE(g0 != nullptr);
  REQUIRE(g1 != nullptr);
  CHECK(g0->serialize() != g1->serialize());

  const auto mem = engine_memory(state);
  // two groups, each with one key and one value set of 512 x 32 floats
  CHECK(mem.kv_bytes == 2 * 2 * 512 * 32 * sizeof(float));
  size_t index_sum = 0;
  for (const auto& hs : state.heads) index_sum += hs.index->memory_bytes();
  CHECK(mem.index_bytes == index_sum);
  CHECK(mem.index_bytes > 0);
}

TEST_CASE("summaries and traces are byte-identical across thread counts") {
  auto heads = make_workload(1024, 4, 2, 8);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::OODGraph;
  cfg.graph.k_train = 16;
  cfg.graph.max_degree = 8;
  cfg.top_k = 20;
  cfg.search_param = 32;
  cfg.compute_reference = true;
  cfg.trace_omega = true;

  auto serial_state = engine_init(heads, cfg);
  auto serial = decode_run(serial_state, 8);
  cfg.n_threads = 4;
  auto threaded_state = engine_init(heads, cfg);
  auto threaded = decode_run(threaded_state, 8);

  CHECK(serial.summary.to_json() == threaded.summary.to_json());
  CHECK(serial.trace.to_jsonl(true) == threaded.trace.to_jsonl(true));
}

TEST_CASE("trace lines carry exactly the advertised fields") {
  auto heads = make_workload(1024, 1, 1, 2);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::Flat;
  cfg.top_k = 10;
  auto state = engine_init(heads, cfg);
  auto run = decode_run(state, 2);

  auto lines = [](const std::string& s) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos < s.size()) {
      const size_t nl = s.find('\n', pos);
      out.push_back(s.substr(pos, nl - pos));
      pos = nl + 1;
    }
    return out;
  };

  auto plain = lines(run.trace.to_jsonl(false));
  REQUIRE(plain.size() == 2);
  auto j = nlohmann::ordered_json::parse(plain[0]);
  std::vector<std::string> keys;
  for (auto& [key, value] : j.items()) keys.push_back(key);
  CHECK(keys == std::vector<std::string>{"step", "head", "scanned"});
  CHECK(j["step"] == 0);
  CHECK(j["scanned"] == 1024 - 640);

  cfg.compute_reference = true;
  auto ref_state = engine_init(heads, cfg);
  auto ref_run = decode_run(ref_state, 1);
  auto with_omega = lines(ref_run.trace.to_jsonl(true));
  auto jo = nlohmann::ordered_json::parse(with_omega[0]);
  keys.clear();
  for (auto& [key, value] : jo.items()) keys.push_back(key);
  CHECK(keys ==
        std::vector<std::string>{"step", "head", "omega_ids", "scanned", "mse"});
  CHECK(jo["omega_ids"].size() == 10);
}

TEST_CASE("approximate retrieval tracks the oracle's attention quality") {
  auto heads = make_workload(2048, 1, 1, 32);
  EngineConfig cfg;
  cfg.top_k = 100;
  cfg.compute_reference = true;

  cfg.index_kind = IndexKind::Flat;
  auto oracle_run = decode_run(engine_init(heads, cfg), 32);

  cfg.index_kind = IndexKind::OODGraph;
  cfg.graph.k_train = 32;
  cfg.graph.max_degree = 16;
  cfg.search_param = 256;
  auto graph_run = decode_run(engine_init(heads, cfg), 32);

  // at this scale both runs can bottom out at the f64 noise floor, so
  // the relative bound carries an absolute floor
  CHECK(graph_run.summary.mean_mse <=
        std::max(10.0 * oracle_run.summary.mean_mse, 1e-10));
  CHECK(graph_run.summary.mean_scan_fraction < 1.0);
  CHECK(graph_run.summary.mean_scan_fraction > 0.0);
}

TEST_CASE("ivf engine honors the nprobe override") {
  auto heads = make_workload(2048, 1, 1, 4);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::IVF;
  cfg.ivf.nlist = 32;
  cfg.seed = 3;
  cfg.top_k = 10;
  cfg.search_param = 1;
  auto narrow = decode_run(engine_init(heads, cfg), 4);
  cfg.search_param = 32;
  auto wide = decode_run(engine_init(heads, cfg), 4);
  CHECK(narrow.summary.total_scanned < wide.summary.total_scanned);
  // probing every cluster scans the entire unmasked pool
  CHECK(wide.summary.mean_scan_fraction == 1.0);
}

TEST_CASE("engine rejects malformed setups") {
  EngineConfig cfg;
  CHECK_THROWS_WITH_AS(engine_init({}, cfg), "no heads", std::invalid_argument);

  auto heads = make_workload(512, 1, 1, 4);
  cfg.top_k = 0;
  CHECK_THROWS_WITH_AS(engine_init(heads, cfg), "top_k must be >= 1",
                       std::invalid_argument);

  cfg = {};
  cfg.index_kind = IndexKind::Flat;
  auto state = engine_init(heads, cfg);
  CHECK_THROWS_WITH_AS(decode_run(state, 5), "insufficient decode queries",
                       std::invalid_argument);

  std::vector<std::span<const float>> too_few;
  CHECK_THROWS_WITH_AS(decode_step(state, too_few, 0),
                       "one query per head required", std::invalid_argument);

  auto empty_keys = std::make_shared<VectorSet>(Role::Key, 0, 32);
  HeadWorkload empty_head;
  empty_head.keys = empty_keys;
  empty_head.values = empty_keys;
  empty_head.prefill_queries = VectorSet(Role::Query, 0, 32);
  empty_head.decode_queries = VectorSet(Role::Query, 0, 32);
  CHECK_THROWS_WITH_AS(engine_init({empty_head}, cfg), "empty context",
                       std::invalid_argument);
}

TEST_CASE("zero steps produce an empty trace and a zero summary") {
  auto heads = make_workload(512, 1, 1, 2);
  EngineConfig cfg;
  cfg.index_kind = IndexKind::Flat;
  auto run = decode_run(engine_init(heads, cfg), 0);
  CHECK(run.trace.entries.empty());
  CHECK(run.summary.n_steps == 0);
  CHECK(run.summary.total_scanned == 0);
  CHECK(run.summary.mean_scan_fraction == 0.0);
  CHECK(run.summary.mean_mse == 0.0);
  CHECK(run.trace.to_jsonl(false).empty());
}
