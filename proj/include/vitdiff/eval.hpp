// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/backbone.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vitdiff {

struct AttentionSite {
  std::string where;
  Index resolution = 0;   // feature-map side (image side / patch for the ViT)
  Index tokens = 0;       // tokens per attention group
  Index groups = 0;       // windows per image (1 for global attention)
  Index layers = 0;       // attention layers at this site
};

struct ModelReport {
  std::string backbone;
  Index image_size = 0;
  Index total_parameters = 0;
  std::vector<std::pair<std::string, Index>> breakdown;  // sums to total_parameters
  double forward_flops = 0.0;                            // per image, 1 multiply-add = 2 FLOPs
  std::vector<AttentionSite> attention;

  std::string to_text() const;
  std::string to_json() const;
};

/// Parameter and FLOP accounting from the configuration alone (no tensors).
/// Attention FLOPs: QK^T and AV matmuls plus 3 FLOPs per softmax logit.
ModelReport count_report(const BackboneConfig& config);

struct ChannelStats {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  double min = 0.0;
  double max = 0.0;
};

/// Exact per-channel statistics over [B, C, H, W] in float64.
template <typename S>
std::vector<ChannelStats> channel_stats(const Tensor<S>& batch);

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct RgbImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;
};

/// round((x + 1) / 2 * 255) with clamping.
std::uint8_t quantize_unit(double x);

/// Tiles [B, 3, H, W] row-major into ceil(B / cols) rows of `cols` images, no padding.
template <typename S>
RgbImage make_grid(const Tensor<S>& batch, Index grid_cols);

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_png(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);
/// PNG as [1, 3, H, W] in [-1, 1].
template <typename S>
Tensor<S> image_to_tensor(const RgbImage& image);

template <typename S>
void emit_sample_grid(const Tensor<S>& batch, const std::filesystem::path& path, Index grid_cols);

/// NumPy .npy (v1.0, little-endian, C order) dump of a tensor.
template <typename S>
void write_npy(const Tensor<S>& tensor, const std::filesystem::path& path);

}  // namespace vitdiff
