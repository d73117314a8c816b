// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/eval.hpp"

#include <png.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vitdiff {

namespace {

// Parameter counts of the primitive layers.
Index linear_params(Index in, Index out, bool bias = true) { return in * out + (bias ? out : 0); }
Index conv_params(Index in, Index out, Index k) { return in * out * k * k + out; }
Index norm_params(Index c) { return 2 * c; }

// Multiply-add counts; converted to FLOPs once at the end.
double linear_macs(Index tokens, Index in, Index out) { return double(tokens) * double(in) * double(out); }
double conv_macs(Index out_h, Index out_w, Index in, Index out, Index k) {
  return double(out_h) * double(out_w) * double(in) * double(out) * double(k * k);
}

class Tally {
 public:
  void add(const std::string& module, Index params) {
    for (auto& [name, count] : entries_)
      if (name == module) {
        count += params;
        return;
      }
    entries_.emplace_back(module, params);
  }
  void macs(double m) { macs_ += m; }
  // Softmax cost is linear in the logits and counted directly in FLOPs.
  void softmax(double logits) { extra_flops_ += 3.0 * logits; }

  void finish(ModelReport& report) const {
    report.breakdown = entries_;
    report.total_parameters = 0;
    for (const auto& [name, count] : entries_) report.total_parameters += count;
    report.forward_flops = 2.0 * macs_ + extra_flops_;
  }

 private:
  std::vector<std::pair<std::string, Index>> entries_;
  double macs_ = 0.0;
  double extra_flops_ = 0.0;
};

// Timestep MLP on the frequency features plus the optional label table and text path.
void count_conditioning(Tally& t, Index freq, Index hidden, Index out, Index classes, bool text, Index text_width,
                        Index text_context) {
  t.add("time_embed", linear_params(freq, hidden) + linear_params(hidden, out));
  t.macs(linear_macs(1, freq, hidden) + linear_macs(1, hidden, out));
  if (classes > 0) t.add("label_embed", (classes + 1) * out);
  if (text) {
    t.add("text", 2 * text_width + linear_params(text_width, out));
    t.macs(linear_macs(1, text_width, out));
    (void)text_context;
  }
}

// Cross-attention from `tokens` queries of width C onto L text tokens of width D.
void count_cross(Tally& t, const std::string& module, Index tokens, Index C, Index D, Index L, Index heads) {
  t.add(module, linear_params(C, C, false) + linear_params(D, 2 * C, false) + linear_params(C, C));
  t.macs(linear_macs(tokens, C, C) + linear_macs(L, D, 2 * C) + linear_macs(tokens, C, C));
  t.macs(2.0 * double(tokens) * double(L) * double(C));
  t.softmax(double(heads) * double(tokens) * double(L));
}

ModelReport count_iuvit(const IUViTConfig& cfg) {
  cfg.validate();
  ModelReport report;
  report.backbone = "iuvit";
  report.image_size = cfg.image_size;
  Tally t;
  const Index C = cfg.hidden_size, p = cfg.patch_size, hidden = cfg.mlp_ratio * C;
  const Index g = cfg.image_size / p, N = g * g, P = 3 * p * p;
  const Index M = N + 1 + (cfg.num_classes > 0 ? 1 : 0);

  t.add("patch_embed", linear_params(P, C));
  t.macs(linear_macs(N, P, C));
  t.add("pos_embed", N * C);
  count_conditioning(t, C, 4 * C, C, cfg.num_classes, cfg.cross_attention, cfg.text_width, cfg.text_context);

  for (Index i = 0; i < cfg.depth; ++i) {
    Index block = norm_params(C) + linear_params(C, 3 * C, false) + linear_params(C, C);
    t.macs(linear_macs(M, C, 3 * C) + linear_macs(M, C, C) + 2.0 * double(M) * double(M) * double(C));
    t.softmax(double(cfg.num_heads) * double(M) * double(M));
    block += norm_params(C) + linear_params(C, hidden) + linear_params(hidden, C);
    t.macs(linear_macs(M, C, hidden) + linear_macs(M, hidden, C));
    if (cfg.use_dwconv_ffn) {
      block += hidden * 9 + hidden;
      t.macs(double(N) * double(hidden) * 9.0);
    }
    t.add("blocks", block);
    if (cfg.cross_attention) {
      t.add("blocks", norm_params(C));
      count_cross(t, "blocks", M, C, cfg.text_width, cfg.text_context, cfg.num_heads);
    }
    if (i > cfg.depth / 2) {
      t.add("long_skips", linear_params(2 * C, C));
      t.macs(linear_macs(M, 2 * C, C));
    }
  }
  t.add("final_norm", norm_params(C));
  if (cfg.head_mode == HeadMode::LinearFirst) {
    t.add("head", linear_params(C, P) + conv_params(3, 3, 3));
    t.macs(linear_macs(N, C, P) + conv_macs(cfg.image_size, cfg.image_size, 3, 3, 3));
  } else {
    const Index ch = C / (p * p);
    t.add("head", conv_params(ch, 3, 3));
    t.macs(conv_macs(cfg.image_size, cfg.image_size, ch, 3, 3));
  }
  t.finish(report);
  report.attention.push_back({"blocks", g, M, 1, cfg.depth});
  return report;
}

struct AscendCounter {
  const ASCENDConfig& cfg;
  Tally& t;
  Index E;

  void resblock(const std::string& module, Index in, Index out, Index res) {
    Index n = norm_params(in) + conv_params(in, out, 3) + linear_params(E, 2 * out) + norm_params(out) +
              conv_params(out, out, 3);
    t.macs(conv_macs(res, res, in, out, 3) + linear_macs(1, E, 2 * out) + conv_macs(res, res, out, out, 3));
    if (in != out) {
      n += conv_params(in, out, 1);
      t.macs(conv_macs(res, res, in, out, 1));
    }
    t.add(module, n);
  }

  void swin_layer(const std::string& module, Index C, Index heads, Index w, Index res) {
    const Index tokens = res * res;
    Index n = 2 * linear_params(E, 2 * C);  // adaLN modulations
    t.macs(2.0 * linear_macs(1, E, 2 * C));
    n += linear_params(C, 3 * C) + linear_params(C, C) + (2 * w - 1) * (2 * w - 1) * heads;
    t.macs(linear_macs(tokens, C, 3 * C) + linear_macs(tokens, C, C));
    t.macs(2.0 * double(tokens) * double(w * w) * double(C));
    t.softmax(double(heads) * double(tokens) * double(w * w));
    n += linear_params(C, 4 * C) + linear_params(4 * C, C);
    t.macs(linear_macs(tokens, C, 4 * C) + linear_macs(tokens, 4 * C, C));
    t.add(module, n);
    if (cfg.cross_attention) {
      t.add(module, norm_params(C));
      count_cross(t, module, tokens, C, cfg.text_width, cfg.text_context, heads);
    }
  }

  void swin_block(const std::string& module, Index in, Index C, Index res) {
    if (in != C) {
      t.add(module, conv_params(in, C, 1));
      t.macs(conv_macs(res, res, in, C, 1));
    }
    const Index w = cfg.effective_window(res), heads = C / cfg.head_channels;
    swin_layer(module, C, heads, w, res);
    swin_layer(module, C, heads, w, res);
  }

  void block(const std::string& module, BlockKind kind, Index in, Index out, Index res) {
    if (kind == BlockKind::Conv) {
      resblock(module, in, out, res);
    } else {
      swin_block(module, in, out, res);
    }
  }

  // `res` is the input side for down-sampling, the output side for up-sampling.
  void resample(Index in, Index out, Index res, bool up) {
    const Index out_res = up ? res : res / 2;
    if (cfg.resample_mode == ResampleMode::PatchMergeExpand) {
      t.add("resample", up ? linear_params(in, 4 * out, false) : linear_params(4 * in, out, false));
      t.macs(up ? linear_macs(out_res * out_res / 4, in, 4 * out) : linear_macs(out_res * out_res, 4 * in, out));
      return;
    }
    t.add("resample", norm_params(in) + conv_params(in, out, 3) + norm_params(out) + conv_params(out, out, 3) +
                          conv_params(in, out, 1));
    t.macs(conv_macs(out_res, out_res, in, out, 3) + conv_macs(out_res, out_res, out, out, 3) +
           conv_macs(out_res, out_res, in, out, 1));
  }
};

ModelReport count_ascend(const ASCENDConfig& cfg) {
  cfg.validate();
  ModelReport report;
  report.backbone = "ascend";
  report.image_size = cfg.image_size;
  Tally t;
  const Index E = 4 * cfg.base_channels, stages = static_cast<Index>(cfg.channel_mult.size());
  AscendCounter counter{cfg, t, E};
  auto channels = [&](Index s) { return cfg.base_channels * cfg.channel_mult[static_cast<std::size_t>(s)]; };
  auto side = [&](Index s) { return cfg.image_size >> s; };
  auto attends = [&](Index res) {
    return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), res) !=
           cfg.attention_resolutions.end();
  };
  auto kind_at = [&](BlockKind side_kind, Index res) {
    return side_kind == BlockKind::Swin && attends(res) ? BlockKind::Swin : BlockKind::Conv;
  };
  auto note_attention = [&](const std::string& where, BlockKind kind, Index res, Index layers) {
    if (kind != BlockKind::Swin) return;
    const Index w = std::min(cfg.window_size, res);
    report.attention.push_back({where, res, w * w, (res / w) * (res / w), layers});
  };

  t.add("stem", conv_params(3, channels(0), 3));
  t.macs(conv_macs(cfg.image_size, cfg.image_size, 3, channels(0), 3));
  count_conditioning(t, cfg.base_channels, E, E, cfg.num_classes, cfg.cross_attention, cfg.text_width,
                     cfg.text_context);

  for (Index s = 0; s < stages; ++s) {
    const Index ch = channels(s), res = side(s);
    const BlockKind kind = kind_at(cfg.encoder_block, res);
    for (Index i = 0; i < cfg.depth_per_stage; ++i) counter.block("encoder", kind, ch, ch, res);
    note_attention("encoder stage " + std::to_string(s), kind, res, 2 * cfg.depth_per_stage);
    if (s + 1 < stages) counter.resample(ch, channels(s + 1), res, false);
  }
  const Index last = stages - 1;
  const BlockKind middle_kind = kind_at(cfg.encoder_block, side(last));
  for (int i = 0; i < 2; ++i) counter.block("middle", middle_kind, channels(last), channels(last), side(last));
  note_attention("middle", middle_kind, side(last), 4);
  for (Index s = last; s >= 0; --s) {
    const Index ch = channels(s), res = side(s);
    const BlockKind kind = kind_at(cfg.decoder_block, res);
    for (Index i = 0; i <= cfg.depth_per_stage; ++i) {
      const bool concat = cfg.skip_mode == SkipMode::Dense || i == 0;
      counter.block("decoder", kind, concat ? 2 * ch : ch, ch, res);
    }
    note_attention("decoder stage " + std::to_string(s), kind, res, 2 * (cfg.depth_per_stage + 1));
    if (s > 0) counter.resample(ch, channels(s - 1), side(s - 1), true);
  }
  t.add("out", norm_params(channels(0)) + conv_params(channels(0), 3, 3));
  t.macs(conv_macs(cfg.image_size, cfg.image_size, channels(0), 3, 3));
  t.finish(report);
  return report;
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ImageIoError(message);
}

}  // namespace

ModelReport count_report(const BackboneConfig& config) {
  return std::visit(
      [](const auto& cfg) {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, IUViTConfig>) {
          return count_iuvit(cfg);
        } else {
          return count_ascend(cfg);
        }
      },
      config);
}

std::string ModelReport::to_text() const {
  std::ostringstream os;
  os << "backbone        " << backbone << "\n";
  os << "image_size      " << image_size << "\n";
  os << "parameters      " << total_parameters << " (" << std::fixed << std::setprecision(2)
     << double(total_parameters) / 1e6 << "M)\n";
  os << "forward_gflops  " << std::setprecision(3) << forward_flops / 1e9 << "\n";
  os << "breakdown:\n";
  for (const auto& [name, count] : breakdown) {
    os << "  " << std::left << std::setw(14) << name << std::right << std::setw(14) << count << "  " << std::setw(6)
       << std::setprecision(2) << 100.0 * double(count) / double(std::max<Index>(total_parameters, 1)) << "%\n";
  }
  os << "attention:\n";
  for (const auto& a : attention) {
    os << "  " << std::left << std::setw(18) << a.where << std::right << " res " << a.resolution << "  tokens/group "
       << a.tokens << "  groups " << a.groups << "  layers " << a.layers << "\n";
  }
  return os.str();
}

std::string ModelReport::to_json() const {
  nlohmann::ordered_json j;
  j["backbone"] = backbone;
  j["image_size"] = image_size;
  j["total_parameters"] = total_parameters;
  j["forward_flops"] = forward_flops;
  j["breakdown"] = nlohmann::ordered_json::object();
  for (const auto& [name, count] : breakdown) j["breakdown"][name] = count;
  j["attention"] = nlohmann::ordered_json::array();
  for (const auto& a : attention) {
    j["attention"].push_back(
        {{"where", a.where}, {"resolution", a.resolution}, {"tokens", a.tokens}, {"groups", a.groups}, {"layers", a.layers}});
  }
  return j.dump();
}

template <typename S>
std::vector<ChannelStats> channel_stats(const Tensor<S>& batch) {
  if (batch.rank() != 4) throw ShapeError("channel_stats expects [B, C, H, W]");
  if (batch.size() == 0) throw std::invalid_argument("channel_stats: empty batch");
  const Index B = batch.dim(0), C = batch.dim(1), HW = batch.dim(2) * batch.dim(3);
  std::vector<ChannelStats> out(static_cast<std::size_t>(C));
  const S* d = batch.data();
  for (Index c = 0; c < C; ++c) {
    double sum = 0.0, lo = INFINITY, hi = -INFINITY;
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < HW; ++i) {
        const double v = double(d[(b * C + c) * HW + i]);
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    const double n = double(B * HW), mean = sum / n;
    double sq = 0.0;
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < HW; ++i) {
        const double dv = double(d[(b * C + c) * HW + i]) - mean;
        sq += dv * dv;
      }
    out[static_cast<std::size_t>(c)] = {mean, std::sqrt(sq / n), lo, hi};
  }
  return out;
}

std::uint8_t quantize_unit(double x) {
  const double v = std::round((x + 1.0) / 2.0 * 255.0);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

template <typename S>
RgbImage make_grid(const Tensor<S>& batch, Index grid_cols) {
  if (batch.rank() != 4 || batch.dim(1) != 3) throw ShapeError("sample grid expects [B, 3, H, W]");
  if (grid_cols < 1) throw std::invalid_argument("grid_cols must be >= 1");
  const Index B = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
  if (B == 0) throw std::invalid_argument("sample grid: empty batch");
  const Index cols = std::min(grid_cols, B), rows = (B + cols - 1) / cols;
  RgbImage img;
  img.width = cols * W;
  img.height = rows * H;
  img.pixels.assign(static_cast<std::size_t>(img.width * img.height * 3), 0);
  const S* d = batch.data();
  for (Index b = 0; b < B; ++b) {
    const Index oy = (b / cols) * H, ox = (b % cols) * W;
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          img.pixels[static_cast<std::size_t>(((oy + y) * img.width + ox + x) * 3 + c)] =
              quantize_unit(double(d[((b * 3 + c) * H + y) * W + x]));
        }
  }
  return img;
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  check(image.pixels.size() == static_cast<std::size_t>(image.width * image.height * 3), "png: pixel buffer size");
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ImageIoError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  RgbImage img;
  img.width = png.width;
  img.height = png.height;
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageIoError("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  return img;
}

template <typename S>
Tensor<S> image_to_tensor(const RgbImage& image) {
  const Index H = image.height, W = image.width;
  Tensor<S> t({1, 3, H, W});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const double v = image.pixels[static_cast<std::size_t>((y * W + x) * 3 + c)];
        t.data()[(c * H + y) * W + x] = static_cast<S>(v / 255.0 * 2.0 - 1.0);
      }
  return t;
}

template <typename S>
void emit_sample_grid(const Tensor<S>& batch, const std::filesystem::path& path, Index grid_cols) {
  write_png(make_grid(batch, grid_cols), path);
}

template <typename S>
void write_npy(const Tensor<S>& tensor, const std::filesystem::path& path) {
  std::string header = "{'descr': '<f" + std::to_string(sizeof(S)) + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < tensor.shape().size(); ++i) {
    header += std::to_string(tensor.shape()[i]);
    if (tensor.shape().size() == 1 || i + 1 < tensor.shape().size()) header += ",";
    if (i + 1 < tensor.shape().size()) header += " ";
  }
  header += "), }";
  // Pad so the data starts on a 64-byte boundary; the header ends with '\n'.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open '" + path.string() + "' for writing");
  const char magic[] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  f.write(magic, 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  f.write(reinterpret_cast<const char*>(&len), 2);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * sizeof(S)));
  if (!f) throw ImageIoError("write failed for '" + path.string() + "'");
}

#define VITDIFF_INSTANTIATE_EVAL(S)                                                       \
  template std::vector<ChannelStats> channel_stats(const Tensor<S>&);                     \
  template RgbImage make_grid(const Tensor<S>&, Index);                                   \
  template Tensor<S> image_to_tensor<S>(const RgbImage&);                                 \
  template void emit_sample_grid(const Tensor<S>&, const std::filesystem::path&, Index); \
  template void write_npy(const Tensor<S>&, const std::filesystem::path&);

VITDIFF_INSTANTIATE_EVAL(float)
VITDIFF_INSTANTIATE_EVAL(double)

}  // namespace vitdiff
