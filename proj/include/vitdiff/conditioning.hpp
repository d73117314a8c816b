// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace vitdiff {

/// Per-batch conditioning inputs. dropped[i] marks sample i as unconditional;
/// every consumer must then ignore its pooled/sequence/label content.
template <typename S>
struct ConditioningBundle {
  std::optional<Tensor<S>> pooled;                  // [B, D_pool]
  std::optional<Tensor<S>> sequence;                // [B, L_ctx, D_seq]
  std::optional<std::vector<std::uint8_t>> mask;    // [B * L_ctx], 1 = valid token
  std::optional<std::vector<Index>> labels;         // [B]
  std::vector<bool> dropped;                        // [B]

  Index batch_size() const { return static_cast<Index>(dropped.size()); }
  bool is_dropped(Index i) const { return dropped.at(static_cast<std::size_t>(i)); }
  /// Checks the mask/sequence pairing and batch consistency.
  void validate() const;

  /// A bundle of `batch` samples with no content, all marked dropped.
  static ConditioningBundle unconditional(Index batch);
};

/// Independent Bernoulli(p_drop) per sample. Dropped samples lose their
/// pooled/sequence content (zeroed), labels (set to the null index
/// `null_label`) and mask (cleared); the backbone substitutes its learned null
/// embeddings for them.
template <typename S>
ConditioningBundle<S> apply_conditioning_dropout(ConditioningBundle<S> bundle, double p_drop, Rng& rng,
                                                 Index null_label = -1);

/// Pooled text vector: the supplied pooled tensor, or the masked mean of the
/// sequence rows (a row with no valid token pools to zero).
template <typename S>
Tensor<S> pooled_text(const ConditioningBundle<S>& bundle);

/// Sinusoidal features [cos(t f_i), sin(t f_i)] with f_i = 10000^(-i / (dim/2));
/// odd `dim` gets a trailing zero column. Returns [timesteps.size(), dim].
template <typename S>
Tensor<S> sinusoidal_embedding(std::span<const double> timesteps, Index dim);

// ------------------------------------------------------------ embedding file

enum class EmbeddingFileErrorKind { Io, BadMagic, UnsupportedVersion, Truncated, DimensionMismatch, DuplicateKey, MissingKey };

class EmbeddingFileError : public std::runtime_error {
 public:
  EmbeddingFileError(EmbeddingFileErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  EmbeddingFileErrorKind kind() const { return kind_; }

 private:
  EmbeddingFileErrorKind kind_;
};

/// In-memory table of precomputed text-encoder outputs, each [context, width]
/// float32, addressed by the dataset sample key. Read-only after load.
class EmbeddingTable {
 public:
  EmbeddingTable(Index context, Index width) : context_(context), width_(width) {}

  Index context() const { return context_; }
  Index width() const { return width_; }
  Index size() const { return static_cast<Index>(keys_.size()); }
  const std::vector<std::string>& keys() const { return keys_; }
  bool contains(const std::string& key) const { return index_.count(key) != 0; }

  void add(const std::string& key, std::span<const float> values);
  std::span<const float> row(const std::string& key) const;

  /// Stacks rows into [keys.size(), context, width].
  template <typename S>
  Tensor<S> gather(std::span<const std::string> keys) const;

 private:
  Index context_;
  Index width_;
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> data_;
};

/// Little-endian container: "DBEM", u32 version = 1, u32 count, u32 context,
/// u32 width, then per record u16 key length, key bytes, context*width float32.
void save_embedding_file(const EmbeddingTable& table, const std::filesystem::path& path);
/// Expected dimensions of 0 skip the corresponding check.
EmbeddingTable load_embedding_file(const std::filesystem::path& path, Index expected_context = 0,
                                   Index expected_width = 0);

// ------------------------------------------------------------ learned embedders

/// Class-label lookup with a reserved null row at index num_classes.
template <typename S>
struct LabelEmbedding {
  Parameter<S>* table = nullptr;
  Index num_classes = 0;

  LabelEmbedding() = default;
  LabelEmbedding(const ParamScope<S>& scope, Index classes, Index width)
      : table(&scope.create("table", {classes + 1, width}, InitSpec::trunc_normal(0.02))), num_classes(classes) {}

  Index null_index() const { return num_classes; }
  /// labels in [0, num_classes]; num_classes selects the null row.
  Var<S> operator()(std::span<const Index> labels) const;
  /// Labels from the bundle with null substituted for dropped or absent entries.
  Var<S> operator()(const ConditioningBundle<S>* bundle, Index batch) const;
};

/// Sinusoidal features followed by Linear -> SiLU -> Linear.
template <typename S>
struct TimestepEmbedder {
  Index frequency_dim = 0;
  Linear<S> fc1;
  Linear<S> fc2;

  TimestepEmbedder() = default;
  TimestepEmbedder(const ParamScope<S>& scope, Index freq_dim, Index hidden, Index out)
      : frequency_dim(freq_dim), fc1(scope.sub("fc1"), freq_dim, hidden), fc2(scope.sub("fc2"), hidden, out) {}

  Var<S> operator()(std::span<const double> timesteps) const {
    return fc2(silu(fc1(constant(sinusoidal_embedding<S>(timesteps, frequency_dim)))));
  }
};

/// Text pathway shared by both backbones: learned null token / null pooled
/// vector for dropped samples and the pooled-vector projection that is added
/// to the timestep embedding.
template <typename S>
struct TextConditioner {
  Index width = 0;
  Parameter<S>* null_token = nullptr;
  Parameter<S>* null_pooled = nullptr;
  Linear<S> pooled_proj;

  struct Context {
    Var<S> sequence;                    // [B, L, width]
    std::vector<std::uint8_t> key_mask; // [B * L]
    Var<S> pooled_embedding;            // [B, out]
  };

  TextConditioner() = default;
  TextConditioner(const ParamScope<S>& scope, Index text_width, Index out)
      : width(text_width),
        null_token(&scope.create("null_token", {text_width}, InitSpec::normal(0.02))),
        null_pooled(&scope.create("null_pooled", {text_width}, InitSpec::normal(0.02))),
        pooled_proj(scope.sub("pooled_proj"), text_width, out) {}

  /// A missing bundle (or missing sequence) treats every sample as dropped;
  /// dropped samples attend to the null token over `context` positions.
  Context prepare(const ConditioningBundle<S>* bundle, Index batch, Index context) const;
};

}  // namespace vitdiff
