#include "attnindex/index_oodgraph.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>

#include "attnindex/util.hpp"

namespace attnindex {

namespace {

class PhaseTimer {
 public:
  explicit PhaseTimer(const char* label)
      : label_(label), start_(std::chrono::steady_clock::now()) {}
  ~PhaseTimer() {
    if (log_level() < LogLevel::Debug) return;
    const double s = std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - start_)
                         .count();
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s: %.2f s", label_, s);
    log_debug(buf);
  }

 private:
  const char* label_;
  std::chrono::steady_clock::time_point start_;
};

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

constexpr char kMagic[4] = {'O', 'O', 'D', 'G'};
constexpr uint32_t kVersion = 1;

template <typename T>
void append_pod(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& blob, size_t& pos) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (pos + sizeof(T) > blob.size()) throw std::runtime_error("truncated graph blob");
  T v;
  std::memcpy(&v, blob.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

OODGraph::OODGraph(std::shared_ptr<const VectorSet> keys,
                   const VectorSet& train_queries, const OODGraphBuildParams& params,
                   int n_threads)
    : SearchIndex(std::move(keys)) {
  if (!keys_ || keys_->n == 0) throw std::invalid_argument("empty keys");
  if (keys_->n > std::numeric_limits<uint32_t>::max())
    throw std::invalid_argument("too many keys");
  if (params.k_train < 1) throw std::invalid_argument("k_train must be >= 1");
  if (params.max_degree < 1) throw std::invalid_argument("max_degree must be >= 1");
  if (params.ef_construction < 1)
    throw std::invalid_argument("ef_construction must be >= 1");
  if (train_queries.n > 0 && train_queries.d != keys_->d)
    throw std::invalid_argument("query dimension mismatch");
  build(train_queries, params, n_threads);
}

OODGraph::OODGraph(std::shared_ptr<const VectorSet> keys, const std::string& blob)
    : SearchIndex(std::move(keys)) {
  if (!keys_ || keys_->n == 0) throw std::invalid_argument("empty keys");
  from_blob(blob);
}

void OODGraph::build(const VectorSet& tq, const OODGraphBuildParams& p,
                     int n_threads) {
  const uint32_t n = uint32_t(keys_->n);
  const uint32_t d = keys_->d;
  max_degree_ = p.max_degree;
  default_ef_ = p.default_ef;

  MatrixRM K(n, d);
  for (uint32_t i = 0; i < n; ++i) {
    auto row = keys_->row(i);
    for (uint32_t j = 0; j < d; ++j) K(i, j) = row[j];
  }
  std::vector<double> norms(n);
  for (uint32_t i = 0; i < n; ++i) norms[i] = K.row(i).squaredNorm();

  // phase 1: exact top keys per training query, by inner product
  const uint32_t kt = uint32_t(std::min<uint64_t>(p.k_train, n));
  const size_t nq = tq.n;
  std::vector<uint32_t> knn(nq * kt);
  {
    PhaseTimer timer("graph build: training knn");
    constexpr size_t kBlock = 128;
    const size_t n_blocks = (nq + kBlock - 1) / kBlock;
    parallel_for(n_blocks, n_threads, [&](size_t b) {
      const size_t r0 = b * kBlock, r1 = std::min(nq, r0 + kBlock);
      MatrixRM Q(r1 - r0, d);
      for (size_t i = r0; i < r1; ++i) {
        auto row = tq.row(i);
        for (uint32_t j = 0; j < d; ++j) Q(i - r0, j) = row[j];
      }
      MatrixRM S = Q * K.transpose();
      for (size_t i = r0; i < r1; ++i) {
        TopKCollector top(kt);
        for (uint32_t id = 0; id < n; ++id) top.offer(id, S(i - r0, id));
        SearchResult r;
        top.finish(r);
        std::copy(r.ids.begin(), r.ids.end(), knn.begin() + i * kt);
      }
    });
  }

  // phase 2: each retrieved key proposes edges toward the same query's
  // better-ranked keys: the top key plus an adjacent rank window
  std::vector<uint64_t> edges;  // (source << 32) | target
  {
    PhaseTimer timer("graph build: edge proposals");
    constexpr size_t kChunk = 1024;
    std::vector<uint64_t> chunk;
    for (size_t q0 = 0; q0 < nq; q0 += kChunk) {
      const size_t q1 = std::min(nq, q0 + kChunk);
      chunk.clear();
      for (size_t qi = q0; qi < q1; ++qi) {
        const uint32_t* row = knn.data() + qi * kt;
        for (uint32_t b = 1; b < kt; ++b) {
          const uint64_t u = row[b];
          const uint32_t lo =
              (p.edge_window > 0 && b > p.edge_window) ? b - p.edge_window : 0;
          if (lo > 0) chunk.push_back(u << 32 | row[0]);
          for (uint32_t a = lo; a < b; ++a) chunk.push_back(u << 32 | row[a]);
        }
      }
      std::sort(chunk.begin(), chunk.end());
      chunk.erase(std::unique(chunk.begin(), chunk.end()), chunk.end());
      edges.insert(edges.end(), chunk.begin(), chunk.end());
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  }

  std::vector<size_t> cand_off(size_t(n) + 1, 0);
  for (uint64_t e : edges) ++cand_off[(e >> 32) + 1];
  for (uint32_t u = 0; u < n; ++u) cand_off[u + 1] += cand_off[u];

  // phase 3: order each node's candidates, keep edges that are not
  // occluded by an already-kept closer neighbor, fill to the cap
  std::vector<std::vector<uint32_t>> adj(n);
  const bool euclid = p.prune_rule == PruneRule::Euclidean;
  PhaseTimer* prune_timer = new PhaseTimer("graph build: prune");
  parallel_for(n, n_threads, [&](size_t ui) {
    const uint32_t u = uint32_t(ui);
    const size_t c0 = cand_off[u], c1 = cand_off[u + 1];
    if (c0 == c1) return;
    std::vector<std::pair<double, uint32_t>> ordered;
    ordered.reserve(c1 - c0);
    for (size_t e = c0; e < c1; ++e) {
      const uint32_t v = uint32_t(edges[e]);
      const double ip = K.row(u).dot(K.row(v));
      ordered.emplace_back(euclid ? norms[u] + norms[v] - 2.0 * ip : -ip, v);
    }
    std::sort(ordered.begin(), ordered.end());
    if (ordered.size() > p.ef_construction) ordered.resize(p.ef_construction);
    auto& kept = adj[u];
    for (const auto& [m_uv, v] : ordered) {
      bool occluded = false;
      for (uint32_t w : kept) {
        const double ip_vw = K.row(v).dot(K.row(w));
        const double m_vw = euclid ? norms[v] + norms[w] - 2.0 * ip_vw : -ip_vw;
        if (m_vw < m_uv) {
          occluded = true;
          break;
        }
      }
      if (!occluded) {
        kept.push_back(v);
        if (kept.size() == max_degree_) break;
      }
    }
    if (kept.size() < max_degree_) {
      for (const auto& [m_uv, v] : ordered) {
        if (kept.size() == max_degree_) break;
        if (std::find(kept.begin(), kept.end(), v) == kept.end()) kept.push_back(v);
      }
    }
  });
  delete prune_timer;
  edges.clear();
  edges.shrink_to_fit();

  // entry point: picked among covered nodes so the first expansion has
  // outgoing edges; falls back to all nodes when nothing is covered
  {
    std::vector<uint32_t> pool;
    for (uint32_t u = 0; u < n; ++u)
      if (!adj[u].empty()) pool.push_back(u);
    if (pool.empty()) {
      pool.resize(n);
      std::iota(pool.begin(), pool.end(), 0u);
    }
    uint32_t best = pool[0];
    if (p.entry_strategy == EntryStrategy::MaxNorm) {
      for (uint32_t u : pool)
        if (norms[u] > norms[best]) best = u;
    } else {
      Eigen::RowVectorXd mean = K.colwise().mean();
      double best_d = std::numeric_limits<double>::infinity();
      for (uint32_t u : pool) {
        const double dist = (K.row(u) - mean).squaredNorm();
        if (dist < best_d) {
          best_d = dist;
          best = u;
        }
      }
    }
    entry_point_ = best;
  }

  // phase 4: attach unreached keys beneath their nearest reached key
  // with spare capacity, chaining attachments so no parent exceeds the
  // degree cap, until everything is reachable from the entry point
  PhaseTimer repair_timer("graph build: repair");
  std::vector<uint8_t> reached(n, 0);
  auto sweep = [&] {
    std::fill(reached.begin(), reached.end(), 0);
    std::vector<uint32_t> stack{uint32_t(entry_point_)};
    reached[entry_point_] = 1;
    while (!stack.empty()) {
      const uint32_t u = stack.back();
      stack.pop_back();
      for (uint32_t v : adj[u])
        if (!reached[v]) {
          reached[v] = 1;
          stack.push_back(v);
        }
    }
  };
  sweep();
  while (true) {
    std::vector<uint32_t> pending;
    for (uint32_t u = 0; u < n; ++u)
      if (!reached[u]) pending.push_back(u);
    if (pending.empty()) break;

    std::vector<uint32_t> anchors;
    for (uint32_t v = 0; v < n; ++v)
      if (reached[v] && adj[v].size() < max_degree_) anchors.push_back(v);
    if (anchors.empty()) {
      // every reached node sits at the cap: drop the least-preferred
      // edge of a deepest reached node, which cannot unreach anything
      // (a node losing its only path would have to sit one level below
      // the maximum breadth-first depth)
      std::vector<uint32_t> depth(n, std::numeric_limits<uint32_t>::max());
      std::vector<uint32_t> queue{uint32_t(entry_point_)};
      depth[entry_point_] = 0;
      uint32_t deepest = uint32_t(entry_point_);
      for (size_t h = 0; h < queue.size(); ++h) {
        const uint32_t u = queue[h];
        if (depth[u] > depth[deepest] || (depth[u] == depth[deepest] && u < deepest))
          deepest = u;
        for (uint32_t v : adj[u])
          if (depth[v] == std::numeric_limits<uint32_t>::max()) {
            depth[v] = depth[u] + 1;
            queue.push_back(v);
          }
      }
      adj[deepest].pop_back();
      anchors.push_back(deepest);
    }

    // nearest anchor per pending node, squared Euclidean distance with
    // ties resolved toward the lower anchor id
    const size_t na = anchors.size();
    MatrixRM A(na, d);
    std::vector<double> a_norm(na);
    for (size_t j = 0; j < na; ++j) {
      A.row(j) = K.row(anchors[j]);
      a_norm[j] = norms[anchors[j]];
    }
    std::vector<uint32_t> nearest(pending.size());
    constexpr size_t kBlock = 256;
    const size_t n_blocks = (pending.size() + kBlock - 1) / kBlock;
    parallel_for(n_blocks, n_threads, [&](size_t bi) {
      const size_t r0 = bi * kBlock, r1 = std::min(pending.size(), r0 + kBlock);
      MatrixRM U(r1 - r0, d);
      for (size_t i = r0; i < r1; ++i) U.row(i - r0) = K.row(pending[i]);
      MatrixRM S = U * A.transpose();
      for (size_t i = r0; i < r1; ++i) {
        size_t best = 0;
        double best_d = a_norm[0] - 2.0 * S(i - r0, 0);
        for (size_t j = 1; j < na; ++j) {
          const double dist = a_norm[j] - 2.0 * S(i - r0, j);
          if (dist < best_d) {
            best_d = dist;
            best = j;
          }
        }
        nearest[i] = anchors[best];
      }
    });

    std::vector<std::pair<uint32_t, uint32_t>> by_anchor(pending.size());
    for (size_t i = 0; i < pending.size(); ++i)
      by_anchor[i] = {nearest[i], pending[i]};
    std::sort(by_anchor.begin(), by_anchor.end());
    size_t g0 = 0;
    while (g0 < by_anchor.size()) {
      size_t g1 = g0;
      while (g1 < by_anchor.size() && by_anchor[g1].first == by_anchor[g0].first)
        ++g1;
      uint32_t t = by_anchor[g0].first;
      std::vector<uint32_t> attached;
      size_t next_t = 0;
      bool deferred = false;
      for (size_t i = g0; i < g1; ++i) {
        const uint32_t u = by_anchor[i].second;
        while (adj[t].size() >= max_degree_) {
          if (next_t >= attached.size()) {
            deferred = true;  // rest of this group waits for the next round
            break;
          }
          t = attached[next_t++];
        }
        if (deferred) break;
        adj[t].push_back(u);
        attached.push_back(u);
        if (adj[u].size() < max_degree_) t = u;
      }
      g0 = g1;
    }
    sweep();
  }

  offsets_.assign(size_t(n) + 1, 0);
  for (uint32_t u = 0; u < n; ++u) offsets_[u + 1] = offsets_[u] + adj[u].size();
  adjacency_.resize(offsets_[n]);
  for (uint32_t u = 0; u < n; ++u)
    std::copy(adj[u].begin(), adj[u].end(), adjacency_.begin() + offsets_[u]);
}

SearchResult OODGraph::search(std::span<const float> q, size_t k, Mask mask,
                              std::optional<uint32_t> ef_opt) const {
  if (q.size() != keys_->d) throw std::invalid_argument("query dimension mismatch");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const size_t ef = ef_opt ? size_t(*ef_opt) : size_t(default_ef_);
  if (ef < k) throw std::invalid_argument("ef must be >= k");

  const uint32_t n = uint32_t(keys_->n);
  std::vector<uint8_t> visited(n, 0);
  // expansion frontier ordered best-first: (score desc, id asc)
  auto frontier_worse = [](const std::pair<double, uint32_t>& a,
                           const std::pair<double, uint32_t>& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second > b.second;
  };
  std::priority_queue<std::pair<double, uint32_t>,
                      std::vector<std::pair<double, uint32_t>>,
                      decltype(frontier_worse)>
      frontier(frontier_worse);
  TopKCollector pool(ef);
  size_t scanned = 0;

  const uint32_t entry = uint32_t(entry_point_);
  visited[entry] = 1;
  const double s0 = dot_f64(q, keys_->row(entry));
  ++scanned;
  frontier.emplace(s0, entry);
  if (!mask.contains(entry)) pool.offer(entry, s0);

  while (!frontier.empty()) {
    const auto [s, u] = frontier.top();
    // the result pool is stable once even the best unexpanded candidate
    // scores below its worst retained entry
    if (pool.full() && s < pool.worst_score()) break;
    frontier.pop();
    for (uint32_t v : neighbors(u)) {
      if (visited[v]) continue;
      visited[v] = 1;
      const double sv = dot_f64(q, keys_->row(v));
      ++scanned;
      frontier.emplace(sv, v);
      if (!mask.contains(v)) pool.offer(v, sv);
    }
  }

  SearchResult full;
  pool.finish(full);
  const size_t take = std::min(k, full.ids.size());
  SearchResult r;
  r.scanned = scanned;
  r.truncated = take < k;
  r.ids.assign(full.ids.begin(), full.ids.begin() + take);
  r.scores.assign(full.scores.begin(), full.scores.begin() + take);
  return r;
}

size_t OODGraph::memory_bytes() const {
  return offsets_.size() * sizeof(uint64_t) + adjacency_.size() * sizeof(uint32_t);
}

uint64_t OODGraph::reachable_count() const {
  std::vector<uint8_t> seen(keys_->n, 0);
  std::vector<uint32_t> stack{uint32_t(entry_point_)};
  seen[entry_point_] = 1;
  uint64_t count = 1;
  while (!stack.empty()) {
    const uint32_t u = stack.back();
    stack.pop_back();
    for (uint32_t v : neighbors(u))
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        stack.push_back(v);
      }
  }
  return count;
}

std::string OODGraph::serialize() const {
  const uint64_t n = keys_->n;
  std::string out;
  out.reserve(28 + size_t(n) * 4 + adjacency_.size() * 8);
  out.append(kMagic, 4);
  append_pod(out, kVersion);
  append_pod(out, n);
  append_pod(out, max_degree_);
  append_pod(out, entry_point_);
  for (uint64_t u = 0; u < n; ++u) {
    append_pod(out, degree(u));
    for (uint32_t v : neighbors(u)) append_pod(out, uint64_t(v));
  }
  return out;
}

void OODGraph::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  const std::string blob = serialize();
  f.write(blob.data(), std::streamsize(blob.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::unique_ptr<OODGraph> OODGraph::load(std::shared_ptr<const VectorSet> keys,
                                         const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string blob((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return std::make_unique<OODGraph>(std::move(keys), blob);
}

void OODGraph::from_blob(const std::string& blob) {
  if (blob.size() < 4 || std::memcmp(blob.data(), kMagic, 4) != 0)
    throw std::runtime_error("bad graph magic");
  size_t pos = 4;
  const uint32_t version = read_pod<uint32_t>(blob, pos);
  if (version != kVersion) throw std::runtime_error("unsupported graph version");
  const uint64_t n = read_pod<uint64_t>(blob, pos);
  if (n != keys_->n) throw std::runtime_error("graph/key count mismatch");
  max_degree_ = read_pod<uint32_t>(blob, pos);
  if (max_degree_ < 1) throw std::runtime_error("bad degree bound");
  entry_point_ = read_pod<uint64_t>(blob, pos);
  if (entry_point_ >= n) throw std::runtime_error("entry point out of range");

  offsets_.assign(size_t(n) + 1, 0);
  adjacency_.clear();
  for (uint64_t u = 0; u < n; ++u) {
    const uint32_t deg = read_pod<uint32_t>(blob, pos);
    if (deg > max_degree_) throw std::runtime_error("degree exceeds bound");
    offsets_[u + 1] = offsets_[u] + deg;
    for (uint32_t j = 0; j < deg; ++j) {
      const uint64_t v = read_pod<uint64_t>(blob, pos);
      if (v >= n) throw std::runtime_error("neighbor id out of range");
      if (v == u) throw std::runtime_error("self loop");
      adjacency_.push_back(uint32_t(v));
    }
  }
  if (pos != blob.size()) throw std::runtime_error("trailing bytes in graph blob");
}

std::unique_ptr<OODGraph> ood_build(std::shared_ptr<const VectorSet> keys,
                                    const VectorSet& train_queries,
                                    const OODGraphBuildParams& params,
                                    int n_threads) {
  return std::make_unique<OODGraph>(std::move(keys), train_queries, params,
                                    n_threads);
}

}  // namespace attnindex
