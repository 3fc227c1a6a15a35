#include "attnindex/engine.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "attnindex/index_flat.hpp"
#include "attnindex/util.hpp"

namespace attnindex {

std::string_view index_kind_name(IndexKind kind) {
  switch (kind) {
    case IndexKind::Flat: return "flat";
    case IndexKind::IVF: return "ivf";
    case IndexKind::OODGraph: return "oodgraph";
  }
  throw std::invalid_argument("bad index kind");
}

EngineState engine_init(const std::vector<HeadWorkload>& workloads,
                        const EngineConfig& config) {
  if (workloads.empty()) throw std::invalid_argument("no heads");
  if (config.top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  const uint64_t t = workloads[0].keys->n;
  if (t == 0) throw std::invalid_argument("empty context");
  for (const auto& w : workloads) {
    if (w.keys->n != t || w.values->n != t)
      throw std::invalid_argument("context length mismatch across heads");
  }

  EngineState state;
  state.config = config;
  state.t = t;
  state.heads.resize(workloads.size());
  state.decode_queries.reserve(workloads.size());
  for (size_t h = 0; h < workloads.size(); ++h) {
    const auto& w = workloads[h];
    HeadState& hs = state.heads[h];
    hs.head_id = w.head_id;
    hs.kv_group_id = w.kv_group_id;
    hs.partition = static_partition(t, config.s_init, config.s_local);
    hs.keys = w.keys;
    hs.values = w.values;
    switch (config.index_kind) {
      case IndexKind::Flat:
        hs.index = flat_build(w.keys);
        break;
      case IndexKind::IVF: {
        IVFBuildParams p = config.ivf;
        p.seed = config.seed;
        hs.index = ivf_build(w.keys, p);
        break;
      }
      case IndexKind::OODGraph:
        hs.index = ood_build(w.keys, w.prefill_queries, config.graph,
                             config.n_threads);
        break;
    }
    state.decode_queries.push_back(w.decode_queries);
  }
  return state;
}

namespace {

TraceEntry run_head(const EngineState& state, uint32_t h,
                    std::span<const float> q, uint64_t step) {
  const HeadState& hs = state.heads[h];
  const auto& w_ids = hs.partition.static_set;
  const auto& pool = hs.partition.dynamic_pool;

  TraceEntry e;
  e.step = step;
  e.head = h;
  e.w_size = w_ids.size();

  if (!pool.empty()) {
    const size_t k = std::min<size_t>(state.config.top_k, pool.size());
    auto r = hs.index->search(q, k, Mask{w_ids}, state.config.search_param);
    e.omega = std::move(r.ids);
    e.scanned = r.scanned;
  }

  const uint32_t d = hs.keys->d;
  const PartialAttention over_w =
      w_ids.empty() ? empty_partial(d)
                    : partial_attention(q, *hs.keys, *hs.values, w_ids);
  const PartialAttention over_omega =
      e.omega.empty() ? empty_partial(d)
                      : partial_attention(q, *hs.keys, *hs.values, e.omega);
  e.out = merge(over_w, over_omega);

  if (state.config.compute_reference) {
    const auto reference = full_attention(q, *hs.keys, *hs.values);
    e.mse = mse(e.out, reference);
  }
  return e;
}

}  // namespace

std::vector<TraceEntry> decode_step(const EngineState& state,
                                    std::span<const std::span<const float>> queries,
                                    uint64_t step) {
  if (queries.size() != state.heads.size())
    throw std::invalid_argument("one query per head required");
  std::vector<TraceEntry> entries(state.heads.size());
  parallel_for(state.heads.size(), state.config.n_threads, [&](size_t h) {
    entries[h] = run_head(state, uint32_t(h), queries[h], step);
  });
  return entries;
}

DecodeResult decode_run(const EngineState& state, uint64_t n_steps) {
  for (const auto& dq : state.decode_queries)
    if (dq.n < n_steps)
      throw std::invalid_argument("insufficient decode queries");

  DecodeResult result;
  result.summary.n_heads = uint32_t(state.heads.size());
  result.summary.n_steps = n_steps;

  for (uint64_t step = 0; step < n_steps; ++step) {
    std::vector<std::span<const float>> queries(state.heads.size());
    for (size_t h = 0; h < state.heads.size(); ++h)
      queries[h] = state.decode_queries[h].row(step);
    auto entries = decode_step(state, queries, step);
    for (auto& e : entries) result.trace.entries.push_back(std::move(e));
  }

  DecodeSummary& s = result.summary;
  size_t with_mse = 0;
  for (const auto& e : result.trace.entries) {
    const uint64_t pool = state.t - e.w_size;
    s.total_scanned += e.scanned;
    s.mean_scanned += double(e.scanned);
    if (pool > 0) s.mean_scan_fraction += double(e.scanned) / double(pool);
    if (e.mse) {
      ++with_mse;
      s.mean_mse += *e.mse;
      s.max_mse = std::max(s.max_mse, *e.mse);
    }
  }
  const size_t n_entries = result.trace.entries.size();
  if (n_entries > 0) {
    s.mean_scanned /= double(n_entries);
    s.mean_scan_fraction /= double(n_entries);
  }
  if (with_mse > 0) s.mean_mse /= double(with_mse);
  return result;
}

std::string DecodeTrace::to_jsonl(bool include_omega) const {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["head"] = e.head;
    if (include_omega) j["omega_ids"] = e.omega;
    j["scanned"] = e.scanned;
    if (e.mse) j["mse"] = *e.mse;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string DecodeSummary::to_json() const {
  nlohmann::ordered_json j;
  j["n_steps"] = n_steps;
  j["n_heads"] = n_heads;
  j["mean_scan_fraction"] = mean_scan_fraction;
  j["mean_scanned"] = mean_scanned;
  j["total_scanned"] = total_scanned;
  j["mean_mse"] = mean_mse;
  j["max_mse"] = max_mse;
  return j.dump(2);
}

MemoryReport engine_memory(const EngineState& state) {
  MemoryReport rep;
  std::set<const VectorSet*> counted;
  for (const auto& hs : state.heads) {
    for (const VectorSet* s : {hs.keys.get(), hs.values.get()}) {
      if (counted.insert(s).second)
        rep.kv_bytes += s->data.size() * sizeof(float);
    }
    rep.index_bytes += hs.index->memory_bytes();
  }
  return rep;
}

}  // namespace attnindex
