#pragma once

#include <memory>
#include <optional>
#include <string>

#include "attnindex/attention.hpp"
#include "attnindex/index.hpp"
#include "attnindex/index_ivf.hpp"
#include "attnindex/index_oodgraph.hpp"
#include "attnindex/types.hpp"

namespace attnindex {

enum class IndexKind { Flat, IVF, OODGraph };

std::string_view index_kind_name(IndexKind kind);

// Strategy for predicting the always-active token set. Only the fixed
// initial+local window exists today; richer predictors would slot in
// here.
enum class PatternStrategy { Static };

struct EngineConfig {
  PatternStrategy pattern = PatternStrategy::Static;
  uint64_t s_init = 128;
  uint64_t s_local = 512;
  uint32_t top_k = 100;
  IndexKind index_kind = IndexKind::OODGraph;
  IVFBuildParams ivf;        // seed is overridden by `seed` below
  OODGraphBuildParams graph;
  // per-query override of the search knob (nprobe or ef); the index
  // default applies when unset
  std::optional<uint32_t> search_param;
  int n_threads = 1;
  uint64_t seed = 0;  // seeds stochastic index builds (IVF k-means)
  bool trace_omega = false;       // include retrieved ids in the trace
  bool compute_reference = false; // full-attention reference and per-entry mse
};

// Per query head: the frozen static/dynamic split and the head's own
// index over the group's shared keys, trained on this head's queries.
struct HeadState {
  uint32_t head_id = 0;
  uint32_t kv_group_id = 0;
  KVPartition partition;
  std::unique_ptr<SearchIndex> index;
  std::shared_ptr<const VectorSet> keys;    // shared per kv group
  std::shared_ptr<const VectorSet> values;  // shared per kv group
};

struct EngineState {
  EngineConfig config;
  uint64_t t = 0;  // context length, shared by all heads
  std::vector<HeadState> heads;
  std::vector<VectorSet> decode_queries;  // per head, used by decode_run
};

struct TraceEntry {
  uint64_t step = 0;
  uint32_t head = 0;
  std::vector<uint32_t> omega;  // retrieved ids, ranked; disjoint from W
  size_t scanned = 0;
  size_t w_size = 0;
  std::vector<double> out;
  std::optional<double> mse;  // vs the full-attention reference
};

struct DecodeTrace {
  std::vector<TraceEntry> entries;

  // one object per (step, head); omega ids only when requested
  std::string to_jsonl(bool include_omega) const;
};

struct DecodeSummary {
  uint64_t n_steps = 0;
  uint32_t n_heads = 0;
  // scanned over unmasked pool size, averaged over (step, head); zero
  // when the static window covers the whole context
  double mean_scan_fraction = 0.0;
  double mean_scanned = 0.0;
  uint64_t total_scanned = 0;
  double mean_mse = 0.0;  // zeros when no reference was computed
  double max_mse = 0.0;

  std::string to_json() const;
};

struct DecodeResult {
  DecodeTrace trace;
  DecodeSummary summary;
};

struct MemoryReport {
  size_t kv_bytes = 0;     // key+value payload, counted once per group
  size_t index_bytes = 0;  // sum over per-head index structures
};

// Builds one index per query head over its group's keys (masking, not
// exclusion, keeps the static set out of retrieval) and freezes the
// static/dynamic partition at the shared context length.
EngineState engine_init(const std::vector<HeadWorkload>& workloads,
                        const EngineConfig& config);

// One decode position: per head, retrieve the dynamic candidates with
// the static set masked, take partial attention over both sets, and
// merge exactly. Heads run concurrently; results are in head order.
std::vector<TraceEntry> decode_step(const EngineState& state,
                                    std::span<const std::span<const float>> queries,
                                    uint64_t step);

// Feeds the stored decode queries through decode_step for n_steps and
// aggregates the summary in (step, head) order.
DecodeResult decode_run(const EngineState& state, uint64_t n_steps);

MemoryReport engine_memory(const EngineState& state);

}  // namespace attnindex
