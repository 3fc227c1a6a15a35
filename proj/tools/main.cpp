#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "attnindex/attention.hpp"
#include "attnindex/diagnostics.hpp"
#include "attnindex/engine.hpp"
#include "attnindex/index_flat.hpp"
#include "attnindex/index_ivf.hpp"
#include "attnindex/index_oodgraph.hpp"
#include "attnindex/io.hpp"
#include "attnindex/util.hpp"
#include "attnindex/workload.hpp"

namespace fs = std::filesystem;

namespace {

using json = nlohmann::ordered_json;
using namespace attnindex;

// One JSON document drives every subcommand. Sections: workload, index,
// engine, output, diagnose; unknown keys anywhere are rejected so typos
// fail loudly instead of silently running defaults.
struct RunConfig {
  WorkloadSpec workload;
  EngineConfig engine;  // index kind and per-kind build params included
  uint64_t n_steps = 64;
  std::vector<uint32_t> grid;  // sweep grid; empty picks a per-kind default
  uint64_t sweep_k = 100;
  std::string out_dir = "out";
  std::vector<std::string> formats = {"csv", "jsonl"};
  uint64_t diag_sample = 5000;
  uint64_t diag_seed = 0;
  std::vector<uint64_t> mse_grid;  // empty picks powers of two
};

[[noreturn]] void bad_value(const std::string& where, const std::string& key) {
  throw std::invalid_argument("bad value for " + where + "." + key);
}

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw std::invalid_argument((where.empty() ? std::string("config") : where) +
                                " must be a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("unknown config key: " +
                                  (where.empty() ? item.key() : where + "." + item.key()));
  }
}

uint64_t as_uint(const json& v, const std::string& where, const std::string& key,
                 uint64_t max) {
  if (v.is_number_integer() && v.get<int64_t>() < 0) bad_value(where, key);
  if (!v.is_number_integer() && !v.is_number_unsigned()) bad_value(where, key);
  uint64_t raw = v.get<uint64_t>();
  if (raw > max) bad_value(where, key);
  return raw;
}

template <typename T>
void fetch_uint(const json& obj, const std::string& where, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  out = T(as_uint(*it, where, key, std::numeric_limits<T>::max()));
}

void fetch_double(const json& obj, const std::string& where, const char* key,
                  double& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_number()) bad_value(where, key);
  out = it->get<double>();
}

void fetch_bool(const json& obj, const std::string& where, const char* key, bool& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_boolean()) bad_value(where, key);
  out = it->get<bool>();
}

void fetch_string(const json& obj, const std::string& where, const char* key,
                  std::string& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_string()) bad_value(where, key);
  out = it->get<std::string>();
}

template <typename T>
void fetch_uint_array(const json& obj, const std::string& where, const char* key,
                      std::vector<T>& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_array()) bad_value(where, key);
  out.clear();
  for (const json& v : *it)
    out.push_back(T(as_uint(v, where, key, std::numeric_limits<T>::max())));
}

RunConfig parse_config(const json& doc) {
  RunConfig cfg;
  check_keys(doc, "", {"workload", "index", "engine", "output", "diagnose"});

  if (doc.contains("workload")) {
    const json& w = doc.at("workload");
    check_keys(w, "workload",
               {"n_ctx", "d_model", "d_head", "n_heads", "n_kv_groups", "seed",
                "ood_strength", "concentration", "n_decode"});
    fetch_uint(w, "workload", "n_ctx", cfg.workload.n_ctx);
    fetch_uint(w, "workload", "d_model", cfg.workload.d_model);
    fetch_uint(w, "workload", "d_head", cfg.workload.d_head);
    fetch_uint(w, "workload", "n_heads", cfg.workload.n_heads);
    fetch_uint(w, "workload", "n_kv_groups", cfg.workload.n_kv_groups);
    fetch_uint(w, "workload", "seed", cfg.workload.seed);
    fetch_double(w, "workload", "ood_strength", cfg.workload.ood_strength);
    fetch_double(w, "workload", "concentration", cfg.workload.concentration);
    fetch_uint(w, "workload", "n_decode", cfg.workload.n_decode);
  }
  cfg.workload.validate();

  if (doc.contains("index")) {
    const json& x = doc.at("index");
    check_keys(x, "index", {"kind", "k", "grid", "ivf", "oodgraph"});
    std::string kind = "oodgraph";
    fetch_string(x, "index", "kind", kind);
    if (kind == "flat")
      cfg.engine.index_kind = IndexKind::Flat;
    else if (kind == "ivf")
      cfg.engine.index_kind = IndexKind::IVF;
    else if (kind == "oodgraph")
      cfg.engine.index_kind = IndexKind::OODGraph;
    else
      throw std::invalid_argument("unknown index kind: " + kind);
    fetch_uint(x, "index", "k", cfg.sweep_k);
    if (cfg.sweep_k == 0) bad_value("index", "k");
    fetch_uint_array(x, "index", "grid", cfg.grid);
    if (x.contains("ivf")) {
      const json& v = x.at("ivf");
      // the k-means seed is engine.seed; one seed per run, never implicit
      check_keys(v, "index.ivf", {"nlist", "iters", "default_nprobe"});
      fetch_uint(v, "index.ivf", "nlist", cfg.engine.ivf.nlist);
      fetch_uint(v, "index.ivf", "iters", cfg.engine.ivf.iters);
      fetch_uint(v, "index.ivf", "default_nprobe", cfg.engine.ivf.default_nprobe);
    }
    if (x.contains("oodgraph")) {
      const json& g = x.at("oodgraph");
      check_keys(g, "index.oodgraph",
                 {"k_train", "max_degree", "ef_construction", "edge_window",
                  "entry_strategy", "prune_rule", "default_ef"});
      fetch_uint(g, "index.oodgraph", "k_train", cfg.engine.graph.k_train);
      fetch_uint(g, "index.oodgraph", "max_degree", cfg.engine.graph.max_degree);
      fetch_uint(g, "index.oodgraph", "ef_construction",
                 cfg.engine.graph.ef_construction);
      fetch_uint(g, "index.oodgraph", "edge_window", cfg.engine.graph.edge_window);
      fetch_uint(g, "index.oodgraph", "default_ef", cfg.engine.graph.default_ef);
      if (g.contains("entry_strategy")) {
        std::string s;
        fetch_string(g, "index.oodgraph", "entry_strategy", s);
        if (s == "medoid")
          cfg.engine.graph.entry_strategy = EntryStrategy::Medoid;
        else if (s == "max_norm")
          cfg.engine.graph.entry_strategy = EntryStrategy::MaxNorm;
        else
          throw std::invalid_argument("unknown entry strategy: " + s);
      }
      if (g.contains("prune_rule")) {
        std::string s;
        fetch_string(g, "index.oodgraph", "prune_rule", s);
        if (s == "euclidean")
          cfg.engine.graph.prune_rule = PruneRule::Euclidean;
        else if (s == "inner_product")
          cfg.engine.graph.prune_rule = PruneRule::InnerProduct;
        else
          throw std::invalid_argument("unknown prune rule: " + s);
      }
    }
  }

  if (doc.contains("engine")) {
    const json& e = doc.at("engine");
    check_keys(e, "engine",
               {"pattern", "s_init", "s_local", "top_k", "search_param", "n_steps",
                "seed", "trace_omega", "compute_reference"});
    if (e.contains("pattern")) {
      std::string s;
      fetch_string(e, "engine", "pattern", s);
      if (s != "static") throw std::invalid_argument("unknown pattern strategy: " + s);
      cfg.engine.pattern = PatternStrategy::Static;
    }
    fetch_uint(e, "engine", "s_init", cfg.engine.s_init);
    fetch_uint(e, "engine", "s_local", cfg.engine.s_local);
    fetch_uint(e, "engine", "top_k", cfg.engine.top_k);
    fetch_uint(e, "engine", "n_steps", cfg.n_steps);
    fetch_uint(e, "engine", "seed", cfg.engine.seed);
    if (e.contains("search_param")) {
      const json& sp = e.at("search_param");
      if (sp.is_null())
        cfg.engine.search_param.reset();
      else
        cfg.engine.search_param = uint32_t(as_uint(
            sp, "engine", "search_param", std::numeric_limits<uint32_t>::max()));
    }
    fetch_bool(e, "engine", "trace_omega", cfg.engine.trace_omega);
    fetch_bool(e, "engine", "compute_reference", cfg.engine.compute_reference);
  }
  if (cfg.engine.top_k == 0) throw std::invalid_argument("engine.top_k must be >= 1");

  if (doc.contains("output")) {
    const json& o = doc.at("output");
    check_keys(o, "output", {"dir", "formats"});
    fetch_string(o, "output", "dir", cfg.out_dir);
    if (o.contains("formats")) {
      const json& f = o.at("formats");
      if (!f.is_array()) bad_value("output", "formats");
      cfg.formats.clear();
      for (const json& v : f) {
        if (!v.is_string()) bad_value("output", "formats");
        std::string s = v.get<std::string>();
        if (s != "csv" && s != "jsonl")
          throw std::invalid_argument("unknown output format: " + s);
        cfg.formats.push_back(s);
      }
      if (cfg.formats.empty())
        throw std::invalid_argument("output.formats must not be empty");
    }
  }

  if (doc.contains("diagnose")) {
    const json& d = doc.at("diagnose");
    check_keys(d, "diagnose", {"sample", "seed", "mse_grid"});
    fetch_uint(d, "diagnose", "sample", cfg.diag_sample);
    fetch_uint(d, "diagnose", "seed", cfg.diag_seed);
    fetch_uint_array(d, "diagnose", "mse_grid", cfg.mse_grid);
    if (cfg.diag_sample == 0) bad_value("diagnose", "sample");
  }
  return cfg;
}

json load_config_doc(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }
  if (!doc.is_object())
    throw std::runtime_error("config root must be a JSON object: " + path);
  return doc;
}

// --set section.key=value writes into the document before parsing, so
// overrides get exactly the same validation as file contents.
void apply_override(json& doc, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override must look like section.key=value: " + spec);
  std::string path = spec.substr(0, eq);
  std::string raw = spec.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare strings need no quotes

  std::vector<std::string> segs;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    segs.push_back(path.substr(start, dot - start));
    if (segs.back().empty())
      throw std::invalid_argument("empty segment in override path: " + path);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json* cur = &doc;
  for (size_t i = 0; i + 1 < segs.size(); ++i) {
    if (!cur->contains(segs[i])) (*cur)[segs[i]] = json::object();
    cur = &(*cur)[segs[i]];
    if (!cur->is_object())
      throw std::invalid_argument("override path through non-object: " + path);
  }
  (*cur)[segs.back()] = value;
}

struct VerifyLog {
  bool enabled = false;
  uint64_t checks = 0;
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (!enabled) return;
    ++checks;
    if (!ok) {
      failures.push_back(what);
      log_error("verify: " + what);
    }
  }
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << content;
  out.close();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

bool wants(const RunConfig& cfg, const char* format) {
  return std::find(cfg.formats.begin(), cfg.formats.end(), format) !=
         cfg.formats.end();
}

// Reuses artifacts of a previous `gen` into the same directory when
// present, otherwise synthesizes the workload in memory.
std::vector<HeadWorkload> acquire_workloads(const RunConfig& cfg, int threads) {
  fs::path manifest = fs::path(cfg.out_dir) / "manifest.json";
  std::vector<HeadWorkload> heads;
  if (fs::exists(manifest)) {
    log_info("loading workload from " + manifest.string());
    heads = load_workloads(manifest);
    if (heads.size() != cfg.workload.n_heads)
      log_warn("manifest head count differs from config; the manifest wins");
  } else {
    log_info("generating workload (no manifest at " + manifest.string() + ")");
    heads = generate_workload(cfg.workload, threads);
  }
  if (heads.empty()) throw std::runtime_error("workload has no heads");
  return heads;
}

std::unique_ptr<SearchIndex> build_index(const RunConfig& cfg,
                                         const HeadWorkload& head, int threads) {
  switch (cfg.engine.index_kind) {
    case IndexKind::Flat:
      return flat_build(head.keys);
    case IndexKind::IVF: {
      IVFBuildParams p = cfg.engine.ivf;
      p.seed = cfg.engine.seed;
      return ivf_build(head.keys, p);
    }
    case IndexKind::OODGraph:
      return ood_build(head.keys, head.prefill_queries, cfg.engine.graph, threads);
  }
  throw std::logic_error("unreachable index kind");
}

void cmd_gen(const RunConfig& cfg, int threads, VerifyLog& v) {
  auto heads = generate_workload(cfg.workload, threads);
  save_workloads(heads, cfg.workload.n_kv_groups, cfg.out_dir);
  fs::path manifest = fs::path(cfg.out_dir) / "manifest.json";
  std::cout << manifest.string() << "\n";
  if (!v.enabled) return;

  auto loaded = load_workloads(manifest);
  v.check(loaded.size() == heads.size(), "gen: reload head count");
  for (size_t h = 0; h < heads.size() && h < loaded.size(); ++h) {
    bool same = loaded[h].prefill_queries.data == heads[h].prefill_queries.data &&
                loaded[h].decode_queries.data == heads[h].decode_queries.data &&
                loaded[h].keys->data == heads[h].keys->data &&
                loaded[h].values->data == heads[h].values->data;
    v.check(same, "gen: head " + std::to_string(h) + " round-trip bit-identity");
  }
  bool shared = true;
  for (size_t i = 0; i < loaded.size(); ++i)
    for (size_t j = i + 1; j < loaded.size(); ++j)
      if (loaded[i].kv_group_id == loaded[j].kv_group_id)
        shared = shared && loaded[i].keys.get() == loaded[j].keys.get() &&
                 loaded[i].values.get() == loaded[j].values.get();
  v.check(shared, "gen: loaded heads share kv storage per group");
}

void cmd_build(const RunConfig& cfg, int threads, VerifyLog& v) {
  auto heads = acquire_workloads(cfg, threads);
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  json report;
  report["kind"] = std::string(index_kind_name(cfg.engine.index_kind));
  report["n_heads"] = heads.size();
  report["n_keys"] = heads[0].keys->n;
  json per_head = json::array();

  std::set<const VectorSet*> counted;
  size_t kv_bytes = 0;
  size_t index_bytes = 0;
  for (const auto& h : heads) {
    auto t0 = std::chrono::steady_clock::now();
    std::unique_ptr<SearchIndex> idx = build_index(cfg, h, threads);
    double ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    // wall time goes to the log, never into the report: artifacts must
    // be byte-identical across reruns and thread counts
    log_info("head " + std::to_string(h.head_id) + " " + std::string(idx->kind()) +
             " build: " + format_double(ms) + " ms");

    json entry;
    entry["head"] = h.head_id;
    entry["kv_group"] = h.kv_group_id;
    if (const auto* g = dynamic_cast<const OODGraph*>(idx.get())) {
      std::string name = "head" + std::to_string(h.head_id) + ".oodg";
      g->save(dir / name);
      entry["artifact"] = name;
      uint64_t edges = 0;
      std::vector<uint64_t> hist(g->max_degree_bound() + 1, 0);
      for (uint64_t u = 0; u < g->size(); ++u) {
        edges += g->degree(u);
        hist[g->degree(u)] += 1;
      }
      entry["edges"] = edges;
      entry["degree_histogram"] = hist;
      entry["entry_point"] = g->entry_point();
      v.check(g->reachable_count() == g->size(),
              "build: head " + std::to_string(h.head_id) + " fully reachable");
      auto back = OODGraph::load(h.keys, dir / name);
      v.check(back->serialize() == g->serialize(),
              "build: head " + std::to_string(h.head_id) + " artifact round-trip");
    } else if (const auto* ivf = dynamic_cast<const IVFIndex*>(idx.get())) {
      entry["artifact"] = nullptr;
      entry["nlist"] = ivf->nlist();
      std::vector<char> seen(ivf->size(), 0);
      uint64_t total = 0;
      bool ok = true;
      for (uint32_t c = 0; c < ivf->nlist(); ++c)
        for (uint32_t id : ivf->list(c)) {
          if (id >= ivf->size() || seen[id]) ok = false;
          else seen[id] = 1;
          ++total;
        }
      v.check(ok && total == ivf->size(),
              "build: head " + std::to_string(h.head_id) + " ivf lists partition keys");
    } else {
      entry["artifact"] = nullptr;
      entry["note"] = "no preprocessing";
    }
    entry["memory_bytes"] = idx->memory_bytes();
    index_bytes += idx->memory_bytes();
    if (counted.insert(h.keys.get()).second)
      kv_bytes += h.keys->data.size() * sizeof(float);
    if (counted.insert(h.values.get()).second)
      kv_bytes += h.values->data.size() * sizeof(float);
    per_head.push_back(std::move(entry));
  }
  report["heads"] = std::move(per_head);
  report["kv_bytes"] = kv_bytes;    // key/value payload once per group
  report["index_bytes"] = index_bytes;

  fs::path out = dir / "build_report.json";
  write_file(out, report.dump(2) + "\n");
  std::cout << out.string() << "\n";
}

std::vector<uint32_t> resolve_grid(const RunConfig& cfg, const HeadWorkload& head) {
  if (!cfg.grid.empty()) return cfg.grid;
  std::vector<uint32_t> g;
  switch (cfg.engine.index_kind) {
    case IndexKind::Flat:
      break;
    case IndexKind::IVF: {
      uint32_t nlist = cfg.engine.ivf.nlist;
      if (nlist == 0) nlist = uint32_t(std::ceil(std::sqrt(double(head.keys->n))));
      for (int i = 0; i < 10; ++i) {
        auto v = uint32_t(std::lround(std::pow(double(nlist), double(i) / 9.0)));
        v = std::clamp<uint32_t>(v, 1, nlist);
        if (g.empty() || g.back() != v) g.push_back(v);
      }
      break;
    }
    case IndexKind::OODGraph:
      for (uint32_t v : {100u, 128u, 160u, 192u, 256u, 320u})
        g.push_back(std::max<uint32_t>(v, uint32_t(cfg.sweep_k)));
      std::sort(g.begin(), g.end());
      g.erase(std::unique(g.begin(), g.end()), g.end());
      break;
  }
  return g;
}

void cmd_sweep(const RunConfig& cfg, int threads, VerifyLog& v) {
  auto heads = acquire_workloads(cfg, threads);
  const HeadWorkload& head = heads[0];
  if (heads.size() > 1)
    log_info("sweeping head 0 of " + std::to_string(heads.size()));

  SweepParams sp;
  sp.index_kind = std::string(index_kind_name(cfg.engine.index_kind));
  sp.grid = resolve_grid(cfg, head);
  sp.k = size_t(cfg.sweep_k);
  sp.ivf = cfg.engine.ivf;
  sp.ivf.seed = cfg.engine.seed;
  sp.graph = cfg.engine.graph;
  sp.n_threads = threads;
  SweepReport rep = recall_sweep(head, sp);

  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  if (wants(cfg, "csv")) {
    write_file(dir / "sweep.csv", rep.to_csv());
    std::cout << (dir / "sweep.csv").string() << "\n";
  }
  if (wants(cfg, "jsonl")) {
    write_file(dir / "sweep.jsonl", rep.to_jsonl());
    std::cout << (dir / "sweep.jsonl").string() << "\n";
  }

  v.check(!rep.rows.empty(), "sweep: produced rows");
  bool bounded = true;
  bool counted = true;
  for (const auto& r : rep.rows) {
    bounded = bounded && r.recall_at_k >= 0.0 && r.recall_at_k <= 1.0 &&
              r.scan_fraction >= 0.0 && r.scan_fraction <= 1.0;
    counted = counted && r.n_queries == head.decode_queries.n;
  }
  v.check(bounded, "sweep: recall and scan fraction within [0,1]");
  v.check(counted, "sweep: every row averages all decode queries");
  if (cfg.engine.index_kind == IndexKind::Flat)
    v.check(rep.rows.size() == 1 && rep.rows[0].recall_at_k == 1.0 &&
                rep.rows[0].scan_fraction == 1.0,
            "sweep: flat oracle row is exact");
}

void cmd_decode(const RunConfig& cfg, int threads, VerifyLog& v) {
  auto heads = acquire_workloads(cfg, threads);
  EngineConfig ec = cfg.engine;
  ec.n_threads = threads;
  EngineState state = engine_init(heads, ec);
  DecodeResult res = decode_run(state, cfg.n_steps);

  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  write_file(dir / "trace.jsonl", res.trace.to_jsonl(ec.trace_omega));
  std::cout << (dir / "trace.jsonl").string() << "\n";
  write_file(dir / "summary.json", res.summary.to_json() + "\n");
  std::cout << (dir / "summary.json").string() << "\n";

  if (!v.enabled) return;
  uint64_t bad_partition = 0;
  for (const auto& hs : state.heads) {
    const auto& w = hs.partition.static_set;
    const auto& p = hs.partition.dynamic_pool;
    std::vector<uint32_t> all(w.size() + p.size());
    std::merge(w.begin(), w.end(), p.begin(), p.end(), all.begin());
    bool ok = all.size() == state.t;
    for (size_t i = 0; ok && i < all.size(); ++i) ok = all[i] == uint32_t(i);
    if (!ok) ++bad_partition;
  }
  v.check(bad_partition == 0, "decode: static/dynamic split partitions [0,t)");

  uint64_t bad_w = 0, bad_range = 0, bad_dup = 0, bad_mask = 0, bad_size = 0;
  uint64_t bad_scanned = 0, bad_mse = 0;
  for (const auto& e : res.trace.entries) {
    const auto& part = state.heads[e.head].partition;
    if (e.w_size != part.static_set.size()) ++bad_w;
    if (e.omega.size() > cfg.engine.top_k || e.omega.size() > part.dynamic_pool.size())
      ++bad_size;
    std::vector<uint32_t> om(e.omega);
    std::sort(om.begin(), om.end());
    if (std::adjacent_find(om.begin(), om.end()) != om.end()) ++bad_dup;
    if (!om.empty() && om.back() >= state.t) ++bad_range;
    for (uint32_t id : e.omega)
      if (std::binary_search(part.static_set.begin(), part.static_set.end(), id)) {
        ++bad_mask;
        break;
      }
    if (part.dynamic_pool.empty() ? e.scanned != 0 : e.scanned > state.t)
      ++bad_scanned;
    if (cfg.engine.compute_reference && !e.mse.has_value()) ++bad_mse;
  }
  v.check(bad_w == 0, "decode: trace w_size matches the frozen split");
  v.check(bad_size == 0, "decode: |omega| bounded by top_k and the pool");
  v.check(bad_dup == 0, "decode: omega free of duplicates");
  v.check(bad_range == 0, "decode: omega ids within [0,t)");
  v.check(bad_mask == 0, "decode: omega disjoint from the static set");
  v.check(bad_scanned == 0, "decode: scanned counter within bounds");
  if (cfg.engine.compute_reference)
    v.check(bad_mse == 0, "decode: every entry carries a reference mse");

  // recompute a prefix of the trace end to end
  uint64_t bad_gamma = 0, bad_merge = 0;
  size_t audit = std::min<size_t>(res.trace.entries.size(), 8);
  for (size_t i = 0; i < audit; ++i) {
    const auto& e = res.trace.entries[i];
    const HeadState& hs = state.heads[e.head];
    auto q = state.decode_queries[e.head].row(e.step);
    const auto& w = hs.partition.static_set;
    uint32_t d = hs.values->d;
    PartialAttention pw =
        w.empty() ? empty_partial(d) : partial_attention(q, *hs.keys, *hs.values, w);
    PartialAttention po = e.omega.empty()
                              ? empty_partial(d)
                              : partial_attention(q, *hs.keys, *hs.values, e.omega);
    if (pw.empty && po.empty) continue;
    auto [g1, g2] = merge_gammas(pw, po);
    if (std::abs(g1 + g2 - 1.0) > 1e-6) ++bad_gamma;
    if (merge(pw, po) != e.out) ++bad_merge;
  }
  v.check(bad_gamma == 0, "decode: merge factors sum to one");
  v.check(bad_merge == 0, "decode: trace outputs reproducible from partials");
}

void cmd_diagnose(const RunConfig& cfg, int threads, VerifyLog& v) {
  auto heads = acquire_workloads(cfg, threads);
  const HeadWorkload& head = heads[0];
  if (heads.size() > 1)
    log_info("diagnosing head 0 of " + std::to_string(heads.size()));

  uint64_t cap = std::min(head.prefill_queries.n,
                          head.keys->n >= 3 ? head.keys->n - 2 : 0);
  uint64_t sample = std::min(cfg.diag_sample, cap);
  if (sample == 0) throw std::runtime_error("context too small for the gap protocol");
  if (sample < cfg.diag_sample)
    log_warn("gap sample clamped to " + std::to_string(sample));
  GapReport gap = mahalanobis_gap(head.prefill_queries, *head.keys, sample,
                                  cfg.diag_seed);

  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  json g;
  g["q_to_k_mean"] = gap.q_to_k_mean;
  g["k_to_k_mean"] = gap.k_to_k_mean;
  g["ratio"] = gap.ratio;
  g["sample"] = sample;
  g["seed"] = cfg.diag_seed;
  write_file(dir / "gap.json", g.dump(2) + "\n");
  std::cout << (dir / "gap.json").string() << "\n";

  std::vector<uint64_t> ks = cfg.mse_grid;
  if (ks.empty())
    for (uint64_t k = 1; k <= head.keys->n && k <= 512; k *= 2) ks.push_back(k);
  auto rows = mse_sweep(head, ks, threads);
  std::string csv = "k,mse\n";
  for (const auto& r : rows)
    csv += std::to_string(r.k) + "," + format_double(r.mse) + "\n";
  write_file(dir / "mse.csv", csv);
  std::cout << (dir / "mse.csv").string() << "\n";

  v.check(std::isfinite(gap.ratio) && gap.ratio > 0.0, "diagnose: gap ratio positive");
  v.check(!rows.empty() && rows.back().mse == 0.0, "diagnose: mse curve ends at zero");
  bool monotone = true;
  for (size_t i = 1; i < rows.size(); ++i)
    monotone = monotone && rows[i].mse <= rows[i - 1].mse + 1e-12;
  v.check(monotone, "diagnose: mse non-increasing in k");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrieval-backed sparse attention workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int threads = 1;
  bool verify = false;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "run config JSON file");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--verify", verify, "run the invariant suite inline");
  app.add_option("--out", out_dir, "output directory (overrides output.dir)");
  app.add_option("--set", sets, "config override, section.key=value");

  app.add_subcommand("gen", "synthesize a workload into KVD1 files plus a manifest")
      ->fallthrough();
  app.add_subcommand("build", "build per-head indexes, write artifacts and a report")
      ->fallthrough();
  app.add_subcommand("sweep", "recall/scan sweep across the index parameter grid")
      ->fallthrough();
  app.add_subcommand("decode", "run the decode loop, write trace and summary")
      ->fallthrough();
  app.add_subcommand("diagnose", "distribution gap report and oracle sparsity curve")
      ->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    json doc = load_config_doc(config_path);
    for (const auto& s : sets) apply_override(doc, s);
    if (!out_dir.empty()) {
      if (!doc.contains("output") || !doc["output"].is_object())
        doc["output"] = json::object();
      doc["output"]["dir"] = out_dir;
    }
    RunConfig cfg = parse_config(doc);

    VerifyLog v;
    v.enabled = verify;
    if (app.got_subcommand("gen")) cmd_gen(cfg, threads, v);
    else if (app.got_subcommand("build")) cmd_build(cfg, threads, v);
    else if (app.got_subcommand("sweep")) cmd_sweep(cfg, threads, v);
    else if (app.got_subcommand("decode")) cmd_decode(cfg, threads, v);
    else if (app.got_subcommand("diagnose")) cmd_diagnose(cfg, threads, v);

    if (verify) {
      json out;
      out["status"] = v.failures.empty() ? "ok" : "failed";
      out["checks"] = v.checks;
      out["failures"] = v.failures;
      std::cout << out.dump() << "\n";
      if (!v.failures.empty()) return 2;
    }
    return 0;
  } catch (const std::exception& e) {
    log_error(e.what());
    return 1;
  }
}
