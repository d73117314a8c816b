// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/trainer.hpp"

#include <filesystem>

namespace vitdiff {

/// Rejected dataset input (missing directory, no images, size mismatch, bad manifest).
class DatasetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Loads every *.png in `dir` (sorted by file name) as [N, 3, S, S] in [-1, 1].
/// Images must already be `image_size` square. Keys are file stems. With a
/// manifest, every image needs a `filename,label` line with 0 <= label < num_classes.
template <typename S>
Dataset<S> load_image_folder(const std::filesystem::path& dir, Index image_size,
                             const std::filesystem::path& manifest = {}, Index num_classes = 0);

/// Throws DatasetError unless every dataset key has a row in the table.
template <typename S>
void attach_text(Dataset<S>& data, const EmbeddingTable& table);

extern template Dataset<float> load_image_folder<float>(const std::filesystem::path&, Index,
                                                        const std::filesystem::path&, Index);
extern template Dataset<double> load_image_folder<double>(const std::filesystem::path&, Index,
                                                          const std::filesystem::path&, Index);
extern template void attach_text(Dataset<float>&, const EmbeddingTable&);
extern template void attach_text(Dataset<double>&, const EmbeddingTable&);

}  // namespace vitdiff
