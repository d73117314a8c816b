// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/conditioning.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace vitdiff {

template <typename S>
void ConditioningBundle<S>::validate() const {
  const Index B = batch_size();
  if (mask.has_value() != sequence.has_value()) throw ShapeError("conditioning: mask present iff sequence present");
  if (sequence) {
    if (sequence->rank() != 3 || sequence->dim(0) != B) {
      throw ShapeError("conditioning: sequence must be [B, L, D], got " + shape_string(sequence->shape()));
    }
    if (static_cast<Index>(mask->size()) != B * sequence->dim(1)) throw ShapeError("conditioning: mask size mismatch");
  }
  if (pooled && (pooled->rank() != 2 || pooled->dim(0) != B)) throw ShapeError("conditioning: pooled must be [B, D]");
  if (labels && static_cast<Index>(labels->size()) != B) throw ShapeError("conditioning: need one label per sample");
}

template <typename S>
ConditioningBundle<S> ConditioningBundle<S>::unconditional(Index batch) {
  ConditioningBundle<S> bundle;
  bundle.dropped.assign(static_cast<std::size_t>(batch), true);
  return bundle;
}

template <typename S>
ConditioningBundle<S> apply_conditioning_dropout(ConditioningBundle<S> bundle, double p_drop, Rng& rng,
                                                 Index null_label) {
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw std::invalid_argument("conditioning dropout probability outside [0, 1]");
  bundle.validate();
  std::bernoulli_distribution draw(p_drop);
  const Index B = bundle.batch_size();
  for (Index b = 0; b < B; ++b) {
    const bool drop = draw(rng) || bundle.dropped[b];
    bundle.dropped[b] = drop;
    if (!drop) continue;
    if (bundle.pooled) {
      const Index D = bundle.pooled->dim(1);
      std::fill_n(bundle.pooled->data() + b * D, D, S(0));
    }
    if (bundle.sequence) {
      const Index L = bundle.sequence->dim(1), D = bundle.sequence->dim(2);
      std::fill_n(bundle.sequence->data() + b * L * D, L * D, S(0));
      std::fill_n(bundle.mask->begin() + b * L, L, std::uint8_t{0});
    }
    if (bundle.labels) (*bundle.labels)[b] = null_label;
  }
  return bundle;
}

template <typename S>
Tensor<S> pooled_text(const ConditioningBundle<S>& bundle) {
  if (bundle.pooled) return *bundle.pooled;
  if (!bundle.sequence) throw std::invalid_argument("pooled_text: bundle has neither pooled vector nor sequence");
  const Tensor<S>& seq = *bundle.sequence;
  const Index B = seq.dim(0), L = seq.dim(1), D = seq.dim(2);
  Tensor<S> out({B, D});
  for (Index b = 0; b < B; ++b) {
    Index valid = 0;
    for (Index l = 0; l < L; ++l) {
      if (!(*bundle.mask)[b * L + l]) continue;
      ++valid;
      for (Index d = 0; d < D; ++d) out[b * D + d] += seq[(b * L + l) * D + d];
    }
    if (valid)
      for (Index d = 0; d < D; ++d) out[b * D + d] /= static_cast<S>(valid);
  }
  return out;
}

template <typename S>
Tensor<S> sinusoidal_embedding(std::span<const double> timesteps, Index dim) {
  if (dim < 1) throw std::invalid_argument("sinusoidal_embedding: dim must be positive");
  const Index n = static_cast<Index>(timesteps.size());
  const Index half = dim / 2;
  Tensor<S> out({n, dim});
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      const double arg = timesteps[i] * freq;
      out[i * dim + j] = static_cast<S>(std::cos(arg));
      out[i * dim + half + j] = static_cast<S>(std::sin(arg));
    }
  return out;
}

// ------------------------------------------------------------ embedding table

void EmbeddingTable::add(const std::string& key, std::span<const float> values) {
  if (static_cast<Index>(values.size()) != context_ * width_) {
    throw EmbeddingFileError(EmbeddingFileErrorKind::DimensionMismatch,
                             "embedding row for '" + key + "' has " + std::to_string(values.size()) + " values, expected " +
                                 std::to_string(context_ * width_));
  }
  if (key.size() > 0xFFFF) throw EmbeddingFileError(EmbeddingFileErrorKind::Io, "embedding key longer than 65535 bytes");
  if (index_.count(key)) throw EmbeddingFileError(EmbeddingFileErrorKind::DuplicateKey, "duplicate embedding key '" + key + "'");
  index_.emplace(key, keys_.size());
  keys_.push_back(key);
  data_.insert(data_.end(), values.begin(), values.end());
}

std::span<const float> EmbeddingTable::row(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw EmbeddingFileError(EmbeddingFileErrorKind::MissingKey, "no embedding for key '" + key + "'");
  const std::size_t stride = static_cast<std::size_t>(context_ * width_);
  return {data_.data() + it->second * stride, stride};
}

template <typename S>
Tensor<S> EmbeddingTable::gather(std::span<const std::string> keys) const {
  const Index n = static_cast<Index>(keys.size());
  Tensor<S> out({n, context_, width_});
  const Index stride = context_ * width_;
  for (Index i = 0; i < n; ++i) {
    auto r = row(keys[i]);
    for (Index j = 0; j < stride; ++j) out[i * stride + j] = static_cast<S>(r[j]);
  }
  return out;
}

namespace {

constexpr char kEmbeddingMagic[4] = {'D', 'B', 'E', 'M'};
constexpr std::uint32_t kEmbeddingVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw EmbeddingFileError(EmbeddingFileErrorKind::Truncated,
                               origin_ + ": truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                                   " more, file has " + std::to_string(bytes_.size()) + ")");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const auto lo = static_cast<unsigned char>(bytes_[pos_]);
    const auto hi = static_cast<unsigned char>(bytes_[pos_ + 1]);
    pos_ += 2;
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t n) {
    need(4 * n);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + 4 * i + k])) << (8 * k);
      std::memcpy(&out[i], &bits, 4);
    }
    pos_ += 4 * n;
  }
  std::size_t position() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  const std::vector<char>& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_embedding_file(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::string out(kEmbeddingMagic, 4);
  put_u32(out, kEmbeddingVersion);
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  put_u32(out, static_cast<std::uint32_t>(table.context()));
  put_u32(out, static_cast<std::uint32_t>(table.width()));
  for (const auto& key : table.keys()) {
    put_u16(out, static_cast<std::uint16_t>(key.size()));
    out += key;
    for (float v : table.row(key)) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw EmbeddingFileError(EmbeddingFileErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw EmbeddingFileError(EmbeddingFileErrorKind::Io, "write failed for '" + path.string() + "'");
}

EmbeddingTable load_embedding_file(const std::filesystem::path& path, Index expected_context, Index expected_width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw EmbeddingFileError(EmbeddingFileErrorKind::Io, "cannot open embedding file '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ByteReader in(bytes, path.string());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbeddingMagic, 4) != 0) {
    throw EmbeddingFileError(EmbeddingFileErrorKind::BadMagic, path.string() + ": not an embedding file (bad magic)");
  }
  in.bytes(4);
  const std::uint32_t version = in.u32();
  if (version != kEmbeddingVersion) {
    throw EmbeddingFileError(EmbeddingFileErrorKind::UnsupportedVersion,
                             path.string() + ": unsupported embedding format version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  const Index context = in.u32();
  const Index width = in.u32();
  if ((expected_context && context != expected_context) || (expected_width && width != expected_width)) {
    throw EmbeddingFileError(EmbeddingFileErrorKind::DimensionMismatch,
                             path.string() + ": header declares context " + std::to_string(context) + ", width " +
                                 std::to_string(width) + " but the configuration expects context " +
                                 std::to_string(expected_context) + ", width " + std::to_string(expected_width));
  }
  EmbeddingTable table(context, width);
  std::vector<float> row;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = in.u16();
    const std::string key = in.bytes(len);
    in.floats(row, static_cast<std::size_t>(context * width));
    table.add(key, row);
  }
  if (in.position() != in.size()) {
    throw EmbeddingFileError(EmbeddingFileErrorKind::Truncated,
                             path.string() + ": " + std::to_string(in.size() - in.position()) + " trailing bytes after last record");
  }
  return table;
}

// ------------------------------------------------------------ embedders

template <typename S>
Var<S> LabelEmbedding<S>::operator()(std::span<const Index> labels) const {
  std::vector<Index> idx(labels.begin(), labels.end());
  for (Index l : idx)
    if (l < 0 || l > num_classes) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + "]");
    }
  return gather_rows(table->var(), idx);
}

template <typename S>
Var<S> LabelEmbedding<S>::operator()(const ConditioningBundle<S>* bundle, Index batch) const {
  std::vector<Index> idx(static_cast<std::size_t>(batch), null_index());
  if (bundle && bundle->labels) {
    for (Index b = 0; b < batch; ++b) {
      if (bundle->is_dropped(b)) continue;
      const Index l = (*bundle->labels)[b];
      if (l < 0 || l >= num_classes) {
        throw std::out_of_range("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
      }
      idx[b] = l;
    }
  }
  return (*this)(idx);
}

template <typename S>
typename TextConditioner<S>::Context TextConditioner<S>::prepare(const ConditioningBundle<S>* bundle, Index batch,
                                                                 Index context) const {
  (void)context;
  const bool has_seq = bundle && bundle->sequence.has_value();
  if (bundle) {
    bundle->validate();
    if (bundle->batch_size() != batch) throw ShapeError("conditioning batch size does not match the image batch");
  }
  if (has_seq && bundle->sequence->dim(2) != width) {
    throw ShapeError("text width mismatch: embeddings have width " + std::to_string(bundle->sequence->dim(2)) +
                     ", backbone expects " + std::to_string(width));
  }
  if (bundle && bundle->pooled && bundle->pooled->dim(1) != width) {
    throw ShapeError("pooled text width mismatch: got " + std::to_string(bundle->pooled->dim(1)) + ", expected " +
                     std::to_string(width));
  }
  const Index L = has_seq ? bundle->sequence->dim(1) : 1;
  Tensor<S> pooled_values;
  if (bundle && (bundle->pooled || bundle->sequence)) pooled_values = pooled_text(*bundle);

  const Var<S> null_row = reshape(null_token->var(), {1, width});
  const Var<S> null_pool = reshape(null_pooled->var(), {1, width});
  std::vector<Var<S>> seq_parts, pooled_parts;
  Context ctx;
  ctx.key_mask.assign(static_cast<std::size_t>(batch * L), std::uint8_t{1});
  for (Index b = 0; b < batch; ++b) {
    const bool dropped = !bundle || bundle->is_dropped(b) || !has_seq;
    if (dropped) {
      seq_parts.push_back(gather_rows(null_row, std::vector<Index>(static_cast<std::size_t>(L), 0)));
    } else {
      Tensor<S> rows({L, width});
      std::copy_n(bundle->sequence->data() + b * L * width, L * width, rows.data());
      seq_parts.push_back(constant(std::move(rows)));
      std::copy_n(bundle->mask->begin() + b * L, L, ctx.key_mask.begin() + b * L);
    }
    const bool pooled_dropped = !bundle || bundle->is_dropped(b) || pooled_values.empty();
    if (pooled_dropped) {
      pooled_parts.push_back(null_pool);
    } else {
      Tensor<S> row({1, width});
      std::copy_n(pooled_values.data() + b * width, width, row.data());
      pooled_parts.push_back(constant(std::move(row)));
    }
  }
  ctx.sequence = reshape(concat(seq_parts, 0), {batch, L, width});
  ctx.pooled_embedding = pooled_proj(concat(pooled_parts, 0));
  return ctx;
}

#define VITDIFF_INSTANTIATE_CONDITIONING(S)                                                                  \
  template struct ConditioningBundle<S>;                                                                     \
  template ConditioningBundle<S> apply_conditioning_dropout(ConditioningBundle<S>, double, Rng&, Index);      \
  template Tensor<S> pooled_text(const ConditioningBundle<S>&);                                              \
  template Tensor<S> sinusoidal_embedding(std::span<const double>, Index);                                   \
  template Tensor<S> EmbeddingTable::gather<S>(std::span<const std::string>) const;                          \
  template struct LabelEmbedding<S>;                                                                         \
  template struct TextConditioner<S>;

VITDIFF_INSTANTIATE_CONDITIONING(float)
VITDIFF_INSTANTIATE_CONDITIONING(double)

}  // namespace vitdiff
