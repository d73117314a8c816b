// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#ifndef VITDIFF_DEFAULT_PRESET_DIR
#define VITDIFF_DEFAULT_PRESET_DIR "configs/presets"
#endif

namespace vitdiff {

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& message) {
  throw ConfigError(field + ": " + message);
}

// Typed access to one YAML mapping; remembers which keys were consumed so
// unknown keys can be reported.
class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail(path_, "must be a mapping");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return node_ && node_.IsMap() && node_[key] && !node_[key].IsNull();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    try {
      return node_[key].as<T>();
    } catch (const YAML::Exception&) {
      fail(field(key), "has the wrong type");
    }
  }

  template <typename T>
  std::vector<T> list(const std::string& key, std::vector<T> fallback) {
    if (!has(key)) return fallback;
    const YAML::Node n = node_[key];
    if (!n.IsSequence()) fail(field(key), "must be a list");
    std::vector<T> out;
    try {
      for (const auto& item : n) out.push_back(item.as<T>());
    } catch (const YAML::Exception&) {
      fail(field(key), "has an entry of the wrong type");
    }
    return out;
  }

  Section child(const std::string& key) {
    has(key);
    return Section(node_ ? node_[key] : YAML::Node(), field(key));
  }

  void reject_unknown() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) fail(field(key), "unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

YAML::Node merge(const YAML::Node& base, const YAML::Node& over) {
  if (!base || !base.IsMap() || !over || !over.IsMap()) return YAML::Clone(over);
  YAML::Node out = YAML::Clone(base);
  for (const auto& kv : over) {
    const auto key = kv.first.as<std::string>();
    out[key] = out[key] ? merge(out[key], kv.second) : YAML::Clone(kv.second);
  }
  return out;
}

YAML::Node parse_yaml(const std::string& text, const std::string& origin) {
  try {
    YAML::Node node = YAML::Load(text);
    if (node.IsNull()) return YAML::Node(YAML::NodeType::Map);
    if (!node.IsMap()) fail(origin, "top level must be a mapping");
    return node;
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": YAML syntax error: " + e.what());
  }
}

std::string read_text(const std::filesystem::path& path, const std::string& what) {
  std::ifstream f(path);
  if (!f) throw ConfigError(what + ": cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Resolves `preset:` chains; a preset may itself name a preset.
YAML::Node resolve(YAML::Node doc, const std::filesystem::path& preset_dir, int depth = 0) {
  if (!doc["preset"] || doc["preset"].IsNull()) return doc;
  if (depth > 8) fail("preset", "preset chain too deep");
  const auto name = doc["preset"].as<std::string>();
  const auto path = preset_dir / (name + ".yaml");
  if (!std::filesystem::exists(path)) fail("preset", "unknown preset '" + name + "' (looked in " + preset_dir.string() + ")");
  YAML::Node base = resolve(parse_yaml(read_text(path, "preset"), "preset " + name), preset_dir, depth + 1);
  YAML::Node merged = merge(base, doc);
  merged["preset"] = name;
  return merged;
}

HeadMode parse_head(const std::string& s, const std::string& field) {
  if (s == "rearrange_first") return HeadMode::RearrangeFirst;
  if (s == "linear_first") return HeadMode::LinearFirst;
  fail(field, "expected rearrange_first or linear_first, got '" + s + "'");
}

BlockKind parse_block(const std::string& s, const std::string& field) {
  if (s == "swin") return BlockKind::Swin;
  if (s == "conv") return BlockKind::Conv;
  fail(field, "expected swin or conv, got '" + s + "'");
}

IUViTConfig parse_iuvit(Section& b) {
  IUViTConfig c;
  c.image_size = b.get<Index>("image_size", c.image_size);
  c.patch_size = b.get<Index>("patch_size", c.patch_size);
  c.depth = b.get<Index>("depth", c.depth);
  c.hidden_size = b.get<Index>("hidden_size", c.hidden_size);
  c.num_heads = b.get<Index>("num_heads", c.num_heads);
  c.mlp_ratio = b.get<Index>("mlp_ratio", c.mlp_ratio);
  c.use_dwconv_ffn = b.get<bool>("dwconv_ffn", c.use_dwconv_ffn);
  c.head_mode = parse_head(b.get<std::string>("head", "rearrange_first"), b.field("head"));
  c.cross_attention = b.get<bool>("cross_attention", c.cross_attention);
  c.text_width = b.get<Index>("text_width", c.text_width);
  c.text_context = b.get<Index>("text_context", c.text_context);
  c.num_classes = b.get<Index>("num_classes", c.num_classes);
  return c;
}

ASCENDConfig parse_ascend(Section& b) {
  ASCENDConfig c;
  c.image_size = b.get<Index>("image_size", c.image_size);
  c.base_channels = b.get<Index>("base_channels", c.base_channels);
  c.depth_per_stage = b.get<Index>("depth", c.depth_per_stage);
  c.channel_mult = b.list<Index>("channel_mult", c.channel_mult);
  c.head_channels = b.get<Index>("head_channels", c.head_channels);
  c.attention_resolutions = b.list<Index>("attention_resolutions", c.attention_resolutions);
  c.window_size = b.get<Index>("window_size", c.window_size);
  c.dropout = b.get<double>("dropout", c.dropout);
  c.encoder_block = parse_block(b.get<std::string>("encoder_block", "swin"), b.field("encoder_block"));
  c.decoder_block = parse_block(b.get<std::string>("decoder_block", "conv"), b.field("decoder_block"));
  const auto resample = b.get<std::string>("resample", "residual");
  if (resample == "residual") {
    c.resample_mode = ResampleMode::Residual;
  } else if (resample == "patch_merge") {
    c.resample_mode = ResampleMode::PatchMergeExpand;
  } else {
    fail(b.field("resample"), "expected residual or patch_merge, got '" + resample + "'");
  }
  const auto skips = b.get<std::string>("skips", "dense");
  if (skips == "dense") {
    c.skip_mode = SkipMode::Dense;
  } else if (skips == "reduced") {
    c.skip_mode = SkipMode::Reduced;
  } else {
    fail(b.field("skips"), "expected dense or reduced, got '" + skips + "'");
  }
  c.cross_attention = b.get<bool>("cross_attention", c.cross_attention);
  c.text_width = b.get<Index>("text_width", c.text_width);
  c.text_context = b.get<Index>("text_context", c.text_context);
  c.num_classes = b.get<Index>("num_classes", c.num_classes);
  return c;
}

void rethrow_as_config(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig build(const YAML::Node& doc, const std::filesystem::path& base_dir) {
  RunConfig rc;
  Section top(doc, "");
  rc.preset = top.get<std::string>("preset", "");

  {
    Section b = top.child("backbone");
    const auto type = b.get<std::string>("type", "iuvit");
    if (type == "iuvit") {
      rc.backbone = parse_iuvit(b);
    } else if (type == "ascend") {
      rc.backbone = parse_ascend(b);
    } else {
      fail("backbone.type", "expected iuvit or ascend, got '" + type + "'");
    }
    b.reject_unknown();
  }
  {
    Section s = top.child("schedule");
    const auto type = s.get<std::string>("type", "linear");
    if (type == "linear") {
      rc.schedule.kind = ScheduleKind::Linear;
    } else if (type == "cosine") {
      rc.schedule.kind = ScheduleKind::Cosine;
    } else {
      fail("schedule.type", "expected linear or cosine, got '" + type + "'");
    }
    rc.schedule.timesteps = s.get<Index>("timesteps", rc.schedule.timesteps);
    rc.schedule.beta_start = s.get<double>("beta_start", rc.schedule.beta_start);
    rc.schedule.beta_end = s.get<double>("beta_end", rc.schedule.beta_end);
    rc.schedule.cosine_offset = s.get<double>("cosine_offset", rc.schedule.cosine_offset);
    s.reject_unknown();
  }
  {
    Section s = top.child("sampler");
    try {
      rc.sampler.family = parse_sampler_family(s.get<std::string>("family", "ddim"));
    } catch (const std::invalid_argument& e) {
      fail("sampler.family", e.what());
    }
    rc.sampler.num_steps = s.get<Index>("steps", rc.sampler.num_steps);
    rc.sampler.eta = s.get<double>("eta", rc.sampler.eta);
    rc.sampler.seed = s.get<std::uint64_t>("seed", rc.sampler.seed);
    rc.sampler.clamp_output = s.get<bool>("clamp", rc.sampler.clamp_output);
    const auto mode = s.get<std::string>("guidance", "none");
    if (mode == "none") {
      rc.sampler.guidance.mode = GuidanceMode::None;
    } else if (mode == "classifier_free") {
      rc.sampler.guidance.mode = GuidanceMode::ClassifierFree;
    } else if (mode == "classifier") {
      rc.sampler.guidance.mode = GuidanceMode::Classifier;
    } else {
      fail("sampler.guidance", "expected none, classifier_free or classifier, got '" + mode + "'");
    }
    rc.sampler.guidance.scale = s.get<double>("guidance_scale", rc.sampler.guidance.scale);
    s.reject_unknown();
  }
  {
    Section s = top.child("train");
    TrainConfig& t = rc.train;
    t.batch_size = s.get<Index>("batch_size", t.batch_size);
    t.learning_rate = s.get<double>("learning_rate", t.learning_rate);
    if (s.has("betas")) {
      const auto betas = s.list<double>("betas", {});
      if (betas.size() != 2) fail("train.betas", "must hold exactly two values");
      t.beta1 = betas[0];
      t.beta2 = betas[1];
    }
    t.adam_eps = s.get<double>("adam_eps", t.adam_eps);
    t.weight_decay = s.get<double>("weight_decay", t.weight_decay);
    t.ema_decay = s.get<double>("ema_decay", t.ema_decay);
    t.max_iterations = s.get<Index>("max_iterations", t.max_iterations);
    if (s.has("grad_clip")) t.grad_clip = s.get<double>("grad_clip", 0.0);
    t.warmup_steps = s.get<Index>("warmup_steps", t.warmup_steps);
    t.seed = s.get<std::uint64_t>("seed", t.seed);
    t.p_drop = s.get<double>("p_drop", t.p_drop);
    s.reject_unknown();
  }
  auto resolve_path = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    const std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  {
    Section s = top.child("data");
    rc.data.dir = resolve_path(s.get<std::string>("dir", ""));
    rc.data.manifest = resolve_path(s.get<std::string>("manifest", ""));
    rc.data.embeddings = resolve_path(s.get<std::string>("embeddings", ""));
    rc.data.num_classes = s.get<Index>("num_classes", 0);
    s.reject_unknown();
  }
  {
    Section s = top.child("output");
    OutputConfig& o = rc.output;
    o.dir = resolve_path(s.get<std::string>("dir", o.dir.string()));
    o.checkpoint_every = s.get<Index>("checkpoint_every", o.checkpoint_every);
    o.sample_every = s.get<Index>("sample_every", o.sample_every);
    o.sample_count = s.get<Index>("sample_count", o.sample_count);
    o.grid_cols = s.get<Index>("grid_cols", o.grid_cols);
    o.log_every = s.get<Index>("log_every", o.log_every);
    s.reject_unknown();
  }
  top.reject_unknown();

  YAML::Emitter out;
  out << doc;
  rc.source_text = out.c_str();
  return rc;
}

// Reads only the header of an embedding file: (context, width).
std::pair<Index, Index> peek_embedding_dims(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("data.embeddings", "cannot open '" + path.string() + "'");
  char magic[4];
  std::uint32_t header[4];  // version, count, context, width
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!f || std::string(magic, 4) != "DBEM") fail("data.embeddings", "'" + path.string() + "' is not an embedding file");
  return {static_cast<Index>(header[2]), static_cast<Index>(header[3])};
}

}  // namespace

NoiseSchedule ScheduleConfig::build() const {
  if (timesteps < 2) fail("schedule.timesteps", "must be >= 2");
  if (kind == ScheduleKind::Linear) {
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
      fail("schedule.beta_start", "need 0 < beta_start <= beta_end < 1");
    }
    return NoiseSchedule::linear(timesteps, beta_start, beta_end);
  }
  if (!(cosine_offset >= 0)) fail("schedule.cosine_offset", "must be >= 0");
  return NoiseSchedule::cosine(timesteps, cosine_offset);
}

void RunConfig::validate() const {
  rethrow_as_config([&] { validate_backbone(backbone); });
  const NoiseSchedule sched = schedule.build();
  rethrow_as_config([&] { sampler.validate(sched); });
  rethrow_as_config([&] { train.validate(); });

  const auto [classes, cross, text_width, text_context] = std::visit(
      [](const auto& c) { return std::tuple{c.num_classes, c.cross_attention, c.text_width, c.text_context}; },
      backbone);
  if (data.num_classes != 0 && data.num_classes != classes) {
    fail("data.num_classes", std::to_string(data.num_classes) + " does not match backbone.num_classes " +
                                 std::to_string(classes));
  }
  if (!data.embeddings.empty()) {
    if (!cross) fail("data.embeddings", "given but the backbone has cross_attention disabled");
    const auto [context, width] = peek_embedding_dims(data.embeddings);
    if (width != text_width) {
      fail("data.embeddings", "embedding width " + std::to_string(width) + " does not match backbone.text_width " +
                                  std::to_string(text_width));
    }
    if (context != text_context) {
      fail("data.embeddings", "embedding context " + std::to_string(context) +
                                  " does not match backbone.text_context " + std::to_string(text_context));
    }
  }
  const bool conditional = classes > 0 || cross;
  if (sampler.guidance.mode == GuidanceMode::ClassifierFree && !conditional) {
    fail("sampler.guidance", "classifier_free guidance needs labels or text conditioning");
  }
  if (sampler.guidance.mode == GuidanceMode::Classifier && classes == 0) {
    fail("sampler.guidance", "classifier guidance needs backbone.num_classes > 0");
  }
  if (output.checkpoint_every < 0) fail("output.checkpoint_every", "must be >= 0");
  if (output.sample_every < 0) fail("output.sample_every", "must be >= 0");
  if (output.sample_count < 1) fail("output.sample_count", "must be >= 1");
  if (output.grid_cols < 1) fail("output.grid_cols", "must be >= 1");
  if (output.log_every < 1) fail("output.log_every", "must be >= 1");
}

std::string RunConfig::model_signature() const {
  std::ostringstream os;
  os.precision(17);
  auto list = [](const std::vector<Index>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
  };
  if (const auto* c = std::get_if<IUViTConfig>(&backbone)) {
    os << "backbone.type=iuvit\n"
       << "backbone.image_size=" << c->image_size << "\nbackbone.patch_size=" << c->patch_size
       << "\nbackbone.depth=" << c->depth << "\nbackbone.hidden_size=" << c->hidden_size
       << "\nbackbone.num_heads=" << c->num_heads << "\nbackbone.mlp_ratio=" << c->mlp_ratio
       << "\nbackbone.dwconv_ffn=" << c->use_dwconv_ffn
       << "\nbackbone.head=" << (c->head_mode == HeadMode::RearrangeFirst ? "rearrange_first" : "linear_first")
       << "\nbackbone.cross_attention=" << c->cross_attention << "\nbackbone.text_width=" << c->text_width
       << "\nbackbone.text_context=" << c->text_context << "\nbackbone.num_classes=" << c->num_classes << "\n";
  } else {
    const auto& a = std::get<ASCENDConfig>(backbone);
    os << "backbone.type=ascend\n"
       << "backbone.image_size=" << a.image_size << "\nbackbone.base_channels=" << a.base_channels
       << "\nbackbone.depth=" << a.depth_per_stage << "\nbackbone.channel_mult=" << list(a.channel_mult)
       << "\nbackbone.head_channels=" << a.head_channels
       << "\nbackbone.attention_resolutions=" << list(a.attention_resolutions)
       << "\nbackbone.window_size=" << a.window_size << "\nbackbone.dropout=" << a.dropout
       << "\nbackbone.encoder_block=" << (a.encoder_block == BlockKind::Swin ? "swin" : "conv")
       << "\nbackbone.decoder_block=" << (a.decoder_block == BlockKind::Swin ? "swin" : "conv")
       << "\nbackbone.resample=" << (a.resample_mode == ResampleMode::Residual ? "residual" : "patch_merge")
       << "\nbackbone.skips=" << (a.skip_mode == SkipMode::Dense ? "dense" : "reduced")
       << "\nbackbone.cross_attention=" << a.cross_attention << "\nbackbone.text_width=" << a.text_width
       << "\nbackbone.text_context=" << a.text_context << "\nbackbone.num_classes=" << a.num_classes << "\n";
  }
  os << "schedule.type=" << to_string(schedule.kind) << "\nschedule.timesteps=" << schedule.timesteps;
  if (schedule.kind == ScheduleKind::Linear) {
    os << "\nschedule.beta_start=" << schedule.beta_start << "\nschedule.beta_end=" << schedule.beta_end << "\n";
  } else {
    os << "\nschedule.cosine_offset=" << schedule.cosine_offset << "\n";
  }
  return os.str();
}

std::filesystem::path default_preset_dir() {
  if (const char* env = std::getenv("VITDIFF_PRESET_DIR"); env && *env) return env;
  return VITDIFF_DEFAULT_PRESET_DIR;
}

RunConfig parse_run_config(const std::string& yaml_text, const std::filesystem::path& preset_dir,
                           const std::filesystem::path& base_dir) {
  RunConfig rc = build(resolve(parse_yaml(yaml_text, "config"), preset_dir), base_dir);
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::filesystem::path& preset_dir) {
  return parse_run_config(read_text(path, "config"), preset_dir, path.parent_path());
}

RunConfig load_preset(const std::string& name, const std::filesystem::path& preset_dir) {
  return parse_run_config("preset: " + name + "\n", preset_dir);
}

std::vector<std::string> list_presets(const std::filesystem::path& preset_dir) {
  std::vector<std::string> names;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(preset_dir, ec)) {
    if (entry.path().extension() == ".yaml") names.push_back(entry.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace vitdiff
