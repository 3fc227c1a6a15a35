#include "attnindex/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace attnindex {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'D', '1'};
constexpr size_t kHeaderBytes = 28;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

[[noreturn]] void format_error(const std::filesystem::path& path,
                               const std::string& what) {
  throw std::runtime_error("kvd1 format error in " + path.string() + ": " + what);
}

}  // namespace

void save_vectors(const VectorSet& set, const std::filesystem::path& path) {
  set.validate();
  std::string header;
  header.reserve(kHeaderBytes);
  header.append(kMagic, 4);
  put_u32(header, 1);
  header.push_back(char(uint8_t(set.role)));
  header.append(3, '\0');
  put_u64(header, set.n);
  put_u32(header, set.d);
  header.append(4, '\0');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(header.data(), std::streamsize(header.size()));
  static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(set.data.data()),
            std::streamsize(set.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

VectorSet load_vectors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  unsigned char header[kHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kHeaderBytes);
  if (in.gcount() != std::streamsize(kHeaderBytes))
    format_error(path, "truncated header");
  if (std::memcmp(header, kMagic, 4) != 0) format_error(path, "bad magic");
  uint32_t version = get_u32(header + 4);
  if (version != 1)
    format_error(path, "unsupported version " + std::to_string(version));
  uint8_t role = header[8];
  if (role > 2) format_error(path, "bad role " + std::to_string(role));
  uint64_t n = get_u64(header + 12);
  uint32_t d = get_u32(header + 20);
  if (d == 0) format_error(path, "d must be >= 1");
  if (n > std::numeric_limits<uint64_t>::max() / sizeof(float) / d)
    format_error(path, "n*d overflows payload size");

  VectorSet set;
  set.role = Role(role);
  set.n = n;
  set.d = d;
  set.data.resize(size_t(n) * d);
  in.read(reinterpret_cast<char*>(set.data.data()),
          std::streamsize(set.data.size() * sizeof(float)));
  if (size_t(in.gcount()) != set.data.size() * sizeof(float))
    format_error(path, "truncated payload");
  char extra;
  if (in.read(&extra, 1)) format_error(path, "trailing bytes after payload");
  set.validate();
  return set;
}

namespace {

using nlohmann::json;

json manifest_to_json(const Manifest& m) {
  json files = json::array();
  for (const auto& f : m.files) {
    files.push_back({{"head", f.head},
                     {"group", f.group},
                     {"role", f.role},
                     {"kind", f.kind},
                     {"path", f.path}});
  }
  return json{{"n_heads", m.n_heads},
              {"n_kv_groups", m.n_kv_groups},
              {"d_head", m.d_head},
              {"rope_note", m.rope_note},
              {"files", files}};
}

}  // namespace

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << manifest_to_json(m).dump(2) << "\n";
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  json j = json::parse(in);
  Manifest m;
  m.n_heads = j.at("n_heads").get<uint32_t>();
  m.n_kv_groups = j.at("n_kv_groups").get<uint32_t>();
  m.d_head = j.at("d_head").get<uint32_t>();
  m.rope_note = j.value("rope_note", "");
  for (const auto& f : j.at("files")) {
    ManifestFile mf;
    mf.head = f.at("head").get<uint32_t>();
    mf.group = f.at("group").get<uint32_t>();
    mf.role = f.at("role").get<std::string>();
    mf.kind = f.at("kind").get<std::string>();
    mf.path = f.at("path").get<std::string>();
    m.files.push_back(std::move(mf));
  }
  return m;
}

Manifest save_workloads(const std::vector<HeadWorkload>& heads,
                        uint32_t n_kv_groups,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.n_heads = uint32_t(heads.size());
  m.n_kv_groups = n_kv_groups;
  m.d_head = heads.empty() ? 0 : heads[0].keys->d;

  std::vector<bool> group_written(n_kv_groups, false);
  for (const auto& h : heads) {
    char name[64];
    std::snprintf(name, sizeof name, "head%u_query_prefill.kvd", h.head_id);
    save_vectors(h.prefill_queries, dir / name);
    m.files.push_back({h.head_id, h.kv_group_id, "query", "prefill", name});
    std::snprintf(name, sizeof name, "head%u_query_decode.kvd", h.head_id);
    save_vectors(h.decode_queries, dir / name);
    m.files.push_back({h.head_id, h.kv_group_id, "query", "decode", name});
    if (!group_written[h.kv_group_id]) {
      group_written[h.kv_group_id] = true;
      std::snprintf(name, sizeof name, "group%u_key.kvd", h.kv_group_id);
      save_vectors(*h.keys, dir / name);
      m.files.push_back({h.head_id, h.kv_group_id, "key", "kv", name});
      std::snprintf(name, sizeof name, "group%u_value.kvd", h.kv_group_id);
      save_vectors(*h.values, dir / name);
      m.files.push_back({h.head_id, h.kv_group_id, "value", "kv", name});
    }
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

std::vector<HeadWorkload> load_workloads(const std::filesystem::path& manifest_path) {
  Manifest m = load_manifest(manifest_path);
  auto dir = manifest_path.parent_path();

  std::vector<std::shared_ptr<const VectorSet>> group_keys(m.n_kv_groups);
  std::vector<std::shared_ptr<const VectorSet>> group_values(m.n_kv_groups);
  std::vector<HeadWorkload> heads(m.n_heads);
  for (uint32_t h = 0; h < m.n_heads; ++h) heads[h].head_id = h;

  for (const auto& f : m.files) {
    if (f.role == "query") {
      if (f.head >= m.n_heads)
        throw std::runtime_error("manifest head out of range: " + f.path);
      auto set = load_vectors(dir / f.path);
      heads[f.head].kv_group_id = f.group;
      if (f.kind == "prefill")
        heads[f.head].prefill_queries = std::move(set);
      else if (f.kind == "decode")
        heads[f.head].decode_queries = std::move(set);
      else
        throw std::runtime_error("manifest query kind unknown: " + f.kind);
    } else if (f.role == "key" || f.role == "value") {
      if (f.group >= m.n_kv_groups)
        throw std::runtime_error("manifest group out of range: " + f.path);
      auto set = std::make_shared<const VectorSet>(load_vectors(dir / f.path));
      if (f.role == "key")
        group_keys[f.group] = std::move(set);
      else
        group_values[f.group] = std::move(set);
    } else {
      throw std::runtime_error("manifest role unknown: " + f.role);
    }
  }
  for (auto& h : heads) {
    h.keys = group_keys.at(h.kv_group_id);
    h.values = group_values.at(h.kv_group_id);
    if (!h.keys || !h.values)
      throw std::runtime_error("manifest missing key/value file for group " +
                               std::to_string(h.kv_group_id));
  }
  return heads;
}

}  // namespace attnindex
