#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attnindex/types.hpp"

namespace attnindex {

// KVD1 binary format, little-endian:
//   bytes 0-3  magic "KVD1"
//   u32        version = 1
//   u8         role (0=Q, 1=K, 2=V)
//   3 bytes    zero padding
//   u64        n
//   u32        d
//   4 bytes    zero padding
//   n*d f32    row-major payload
// Header is 28 bytes. Malformed input raises std::runtime_error naming
// the offending field.
void save_vectors(const VectorSet& set, const std::filesystem::path& path);
VectorSet load_vectors(const std::filesystem::path& path);

struct ManifestFile {
  uint32_t head = 0;
  uint32_t group = 0;
  std::string role;  // "query" | "key" | "value"
  std::string kind;  // queries: "prefill" | "decode"; key/value: "kv"
  std::string path;  // relative to the manifest directory
};

struct Manifest {
  uint32_t n_heads = 0;
  uint32_t n_kv_groups = 0;
  uint32_t d_head = 0;
  // Dumped keys may be pre- or post-RoPE; the loader does not care, but
  // the producer records what it wrote.
  std::string rope_note = "synthetic vectors, no positional rotation applied";
  std::vector<ManifestFile> files;
};

void save_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

// Writes one KVD1 file per head role (queries) and per group (keys and
// values, stored once per GQA group) plus manifest.json into dir.
Manifest save_workloads(const std::vector<HeadWorkload>& heads,
                        uint32_t n_kv_groups,
                        const std::filesystem::path& dir);

// Rebuilds the per-head bundles; heads of one group share one loaded
// key set and one value set (pointer identity preserved).
std::vector<HeadWorkload> load_workloads(const std::filesystem::path& manifest_path);

}  // namespace attnindex
