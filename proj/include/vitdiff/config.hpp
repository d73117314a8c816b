// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: one YAML document with sections backbone, schedule,
// sampler, train, data and output. A top-level `preset: <name>` loads
// <preset_dir>/<name>.yaml first and deep-merges the document over it.

#pragma once

#include "vitdiff/backbone.hpp"
#include "vitdiff/samplers.hpp"
#include "vitdiff/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace vitdiff {

/// Raised for any invalid configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Linear;
  Index timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double cosine_offset = 0.008;

  NoiseSchedule build() const;
};

struct DataConfig {
  std::filesystem::path dir;         // directory of equal-sized PNGs
  std::filesystem::path manifest;    // optional `filename,label` lines
  std::filesystem::path embeddings;  // optional text-embedding file
  Index num_classes = 0;
};

struct OutputConfig {
  std::filesystem::path dir = "runs/default";
  Index checkpoint_every = 1000;
  Index sample_every = 0;  // 0 disables periodic sample grids
  Index sample_count = 16;
  Index grid_cols = 4;
  Index log_every = 1;
};

struct RunConfig {
  std::string preset;  // empty when none was used
  BackboneConfig backbone = IUViTConfig{};
  ScheduleConfig schedule;
  SamplerSpec sampler;
  TrainConfig train;
  DataConfig data;
  OutputConfig output;
  std::string source_text;  // fully merged document

  /// Cross-section validation; throws ConfigError.
  void validate() const;
  /// Canonical `key=value` lines for every backbone and schedule field. This is
  /// the text checkpoints are tied to, so sampler/train/output edits keep
  /// existing checkpoints loadable.
  std::string model_signature() const;
  std::uint64_t hash() const { return fnv1a64(model_signature()); }
};

/// Directory holding <name>.yaml presets. VITDIFF_PRESET_DIR overrides the built-in default.
std::filesystem::path default_preset_dir();

RunConfig parse_run_config(const std::string& yaml_text, const std::filesystem::path& preset_dir = default_preset_dir(),
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::filesystem::path& preset_dir = default_preset_dir());
RunConfig load_preset(const std::string& name, const std::filesystem::path& preset_dir = default_preset_dir());
std::vector<std::string> list_presets(const std::filesystem::path& preset_dir = default_preset_dir());

}  // namespace vitdiff
