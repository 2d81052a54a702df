#pragma once

// Versioned binary container for model specs plus named parameter tensors.
//
// Layout (little-endian):
//   8 bytes   magic "XKDCKPT\0"
//   u32       format version
//   u64, ...  metadata JSON length and bytes (keys sorted)
//   u64       tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 data[]
//
// Identical contents serialize to identical bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crosskd/nn.hpp"
#include "json.hpp"

namespace crosskd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  void add(const NamedTensors& params);
  void add(const NamedBuffers& buffers);
  const StoredTensor* find(const std::string& name) const;
  bool has_prefix(const std::string& prefix) const;

  /// Copies stored values into matching parameters. Throws DataError when a
  /// parameter is missing or mis-shaped.
  void restore(const NamedTensors& params) const;
  void restore(const NamedBuffers& buffers) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

/// Writes to a sibling temp file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Atomic text write, same temp-then-rename discipline.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace crosskd
