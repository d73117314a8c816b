// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/data.hpp"

#include "vitdiff/eval.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

namespace vitdiff {

namespace {

std::map<std::string, Index> read_manifest(const std::filesystem::path& path, Index num_classes) {
  std::ifstream f(path);
  if (!f) throw DatasetError("data.manifest: cannot read '" + path.string() + "'");
  std::map<std::string, Index> labels;
  std::string line;
  for (Index lineno = 1; std::getline(f, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.rfind(',');
    const std::string where = "data.manifest line " + std::to_string(lineno);
    if (comma == std::string::npos) throw DatasetError(where + ": expected 'filename,label'");
    Index label = 0;
    try {
      std::size_t used = 0;
      label = std::stoll(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DatasetError(where + ": label is not an integer");
    }
    if (label < 0 || label >= num_classes) {
      throw DatasetError(where + ": label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    labels[line.substr(0, comma)] = label;
  }
  return labels;
}

}  // namespace

template <typename S>
Dataset<S> load_image_folder(const std::filesystem::path& dir, Index image_size, const std::filesystem::path& manifest,
                             Index num_classes) {
  if (dir.empty()) throw DatasetError("data.dir: not set");
  if (!std::filesystem::is_directory(dir)) throw DatasetError("data.dir: '" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DatasetError("data.dir: no .png images in '" + dir.string() + "'");

  std::map<std::string, Index> labels;
  if (!manifest.empty()) {
    if (num_classes < 1) throw DatasetError("data.manifest: given but backbone.num_classes is 0");
    labels = read_manifest(manifest, num_classes);
  }

  const Index N = static_cast<Index>(files.size()), plane = image_size * image_size;
  Dataset<S> data;
  data.images = Tensor<S>({N, 3, image_size, image_size});
  if (!manifest.empty()) data.labels.emplace();
  for (Index i = 0; i < N; ++i) {
    const auto& file = files[static_cast<std::size_t>(i)];
    RgbImage img;
    try {
      img = read_png(file);
    } catch (const ImageIoError& e) {
      throw DatasetError(std::string("data.dir: ") + e.what());
    }
    if (img.width != image_size || img.height != image_size) {
      throw DatasetError("data.dir: '" + file.filename().string() + "' is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + ", expected " + std::to_string(image_size) + "x" +
                         std::to_string(image_size) + " (resizing is not supported)");
    }
    const Tensor<S> t = image_to_tensor<S>(img);
    std::memcpy(data.images.data() + i * 3 * plane, t.data(), sizeof(S) * static_cast<std::size_t>(3 * plane));
    data.keys.push_back(file.stem().string());
    if (data.labels) {
      const auto it = labels.find(file.filename().string());
      if (it == labels.end()) throw DatasetError("data.manifest: no label for '" + file.filename().string() + "'");
      data.labels->push_back(it->second);
    }
  }
  return data;
}

template <typename S>
void attach_text(Dataset<S>& data, const EmbeddingTable& table) {
  for (const auto& key : data.keys) {
    if (!table.contains(key)) throw DatasetError("data.embeddings: no embedding for image '" + key + "'");
  }
  data.text = &table;
}

template Dataset<float> load_image_folder<float>(const std::filesystem::path&, Index, const std::filesystem::path&,
                                                 Index);
template Dataset<double> load_image_folder<double>(const std::filesystem::path&, Index, const std::filesystem::path&,
                                                   Index);
template void attach_text(Dataset<float>&, const EmbeddingTable&);
template void attach_text(Dataset<double>&, const EmbeddingTable&);

}  // namespace vitdiff
