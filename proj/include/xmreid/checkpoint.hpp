#pragma once

#include "xmreid/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Self-describing parameter file: string metadata plus named float64 arrays.
///
/// Layout (all integers little-endian):
///   "XMREIDCK" | u32 version | u32 n_meta | n_meta x (str key, str value)
///   | u32 n_arrays | n_arrays x (str name, u32 rank, rank x u64 dim, f64 values...)
/// where str is u32 length followed by raw bytes. Metadata is written in key
/// order, arrays in insertion order, so save -> load -> save is byte-identical.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  void add(const std::string& prefix, const NamedTensors& tensors);
  /// Copies stored arrays into same-named tensors; shapes must match exactly.
  void restore(const std::string& prefix, NamedTensors& tensors) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the raw bytes of every tensor's values, in order.
std::uint64_t checksum(std::span<const Tensor> tensors);
std::uint64_t checksum(const NamedTensors& tensors);
std::string hex(std::uint64_t value);

}  // namespace xmreid
