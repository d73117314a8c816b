// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Versioned, checksummed container for model / EMA / optimizer tensors.
//
// Layout (little-endian): "DBCK", u32 version, string config text,
// u64 config hash, i64 iteration, i64 optimizer steps, string RNG state,
// three tensor tables (model, ema, optimizer), u32 CRC-32 of all preceding
// bytes. A string is u64 length + bytes; a table is u64 count + records of
// (string name, u8 dtype, u32 rank, i64 dims[rank], u64 nbytes, bytes).

#pragma once

#include "vitdiff/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vitdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

template <typename S>
constexpr DType dtype_of() {
  return sizeof(S) == 4 ? DType::Float32 : DType::Float64;
}
inline std::size_t dtype_size(DType d) { return d == DType::Float32 ? 4 : 8; }

struct NamedTensor {
  std::string name;
  DType dtype = DType::Float32;
  Shape shape;
  std::vector<char> bytes;

  template <typename S>
  static NamedTensor from(const std::string& name, const Tensor<S>& t);
  /// Throws CheckpointError on dtype or shape mismatch.
  template <typename S>
  Tensor<S> to_tensor(const Shape& expected) const;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t config_hash = 0;
  Index iteration = 0;
  Index optimizer_steps = 0;
  std::string rng_state;
  std::vector<NamedTensor> model;
  std::vector<NamedTensor> ema;
  std::vector<NamedTensor> optimizer;

  const NamedTensor* find(const std::vector<NamedTensor>& table, const std::string& name) const;
};

enum class CheckpointErrorKind { Io, Corrupt, VersionMismatch, MissingTensor, ShapeMismatch, ConfigMismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

/// FNV-1a 64-bit, used to tie checkpoints to configurations.
std::uint64_t fnv1a64(const std::string& text);

std::vector<char> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::vector<char>& bytes);
/// Atomic: writes `path.tmp`, fsyncs, renames over `path`.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct CheckpointSizeAudit {
  Index parameter_count = 0;
  std::uint64_t tensor_bytes = 0;     // raw model + EMA payload
  std::uint64_t file_bytes = 0;       // exact serialized size (model + EMA, no optimizer state)
  std::uint64_t optimizer_bytes = 0;  // additional bytes the two AdamW moment tables add
  double overhead_fraction() const {
    return tensor_bytes ? static_cast<double>(file_bytes - tensor_bytes) / static_cast<double>(tensor_bytes) : 0.0;
  }
};

/// Exact checkpoint size for a parameter layout without allocating weights.
template <typename S>
CheckpointSizeAudit audit_checkpoint_size(const ParameterStore<S>& params, const std::string& config_text);

}  // namespace vitdiff
