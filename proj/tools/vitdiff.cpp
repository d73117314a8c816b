// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// vitdiff command-line front end: train, sample, inspect, noise-demo.
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include "vitdiff/config.hpp"
#include "vitdiff/data.hpp"
#include "vitdiff/eval.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace vitdiff;
using json = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct ConfigSource {
  std::string config_path;
  std::string preset;
  std::string preset_dir;

  void add_to(CLI::App* cmd) {
    auto* cfg = cmd->add_option("-c,--config", config_path, "Run configuration (YAML)");
    auto* pre = cmd->add_option("-p,--preset", preset, "Preset name instead of a config file");
    cfg->excludes(pre);
    cmd->add_option("--preset-dir", preset_dir, "Directory with preset YAML files");
  }

  RunConfig load() const {
    const std::filesystem::path dir = preset_dir.empty() ? default_preset_dir() : std::filesystem::path(preset_dir);
    if (!config_path.empty()) return load_run_config(config_path, dir);
    if (!preset.empty()) return load_preset(preset, dir);
    throw ConfigError("config: pass --config FILE or --preset NAME");
  }
};

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool is_conditional(const BackboneConfig& b, Index* classes = nullptr) {
  return std::visit(
      [&](const auto& c) {
        if (classes) *classes = c.num_classes;
        return c.num_classes > 0 || c.cross_attention;
      },
      b);
}

// Conditioning for a sampling batch: labels cycle through the classes unless
// one is forced; text rows come from one embedding key for every sample.
std::optional<ConditioningBundle<float>> sampling_conditioning(const RunConfig& rc, Index batch, std::optional<Index> label,
                                                               const std::string& text_key) {
  Index classes = 0;
  if (!is_conditional(rc.backbone, &classes)) return std::nullopt;
  ConditioningBundle<float> bundle;
  bundle.dropped.assign(static_cast<std::size_t>(batch), false);
  if (classes > 0) {
    std::vector<Index> labels;
    for (Index i = 0; i < batch; ++i) labels.push_back(label ? *label : i % classes);
    for (Index l : labels) {
      if (l < 0 || l >= classes) throw ConfigError("--label: " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
    bundle.labels = labels;
  }
  const bool text = std::visit([](const auto& c) { return c.cross_attention; }, rc.backbone);
  if (text) {
    if (text_key.empty()) {
      bundle.dropped.assign(static_cast<std::size_t>(batch), true);  // unconditional text branch
    } else {
      if (rc.data.embeddings.empty()) throw ConfigError("--text-key: data.embeddings is not configured");
      const EmbeddingTable table = load_embedding_file(rc.data.embeddings);
      if (!table.contains(text_key)) throw ConfigError("--text-key: '" + text_key + "' not in the embedding file");
      const std::vector<std::string> keys(static_cast<std::size_t>(batch), text_key);
      bundle.sequence = table.gather<float>(keys);
      bundle.mask = std::vector<std::uint8_t>(static_cast<std::size_t>(batch * table.context()), 1);
    }
  }
  return bundle;
}

SampleResult<float> draw_samples(const Denoiser<float>& model, const RunConfig& rc, const SamplerSpec& spec,
                                 const NoiseSchedule& sched, Index count, const ConditioningBundle<float>* cond) {
  const Index n = model.image_size();
  const EpsilonModel<float> eps = [&](const Tensor<float>& x, std::span<const double> t,
                                      const ConditioningBundle<float>* c) { return model.predict(x, t, c); };
  (void)rc;
  return run_sampler<float>(eps, spec, sched, {count, 3, n, n}, cond);
}

void copy_weights(Denoiser<float>& dst, const std::vector<Tensor<float>>& values) {
  auto& params = dst.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = values[i];
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  ConfigSource source;
  std::string resume;
  std::string data_dir;
  std::string out_dir;
  Index max_iterations = -1;
};

int cmd_train(const TrainArgs& args) {
  RunConfig rc = args.source.load();
  if (!args.data_dir.empty()) rc.data.dir = args.data_dir;
  if (!args.out_dir.empty()) rc.output.dir = args.out_dir;
  if (args.max_iterations >= 0) rc.train.max_iterations = args.max_iterations;
  rc.validate();

  const NoiseSchedule sched = rc.schedule.build();
  Index classes = 0;
  is_conditional(rc.backbone, &classes);
  Dataset<float> data = load_image_folder<float>(rc.data.dir, backbone_image_size(rc.backbone), rc.data.manifest, classes);
  std::optional<EmbeddingTable> table;
  if (!rc.data.embeddings.empty()) {
    const bool text = std::visit([](const auto& c) { return c.cross_attention; }, rc.backbone);
    Index ctx = 0, width = 0;
    std::visit([&](const auto& c) { ctx = c.text_context, width = c.text_width; }, rc.backbone);
    table = load_embedding_file(rc.data.embeddings, ctx, width);
    if (text) attach_text(data, *table);
  }

  auto model = make_backbone<float>(rc.backbone, rc.train.seed);
  Trainer<float> trainer(*model, sched, rc.train, rc.model_signature());
  std::filesystem::create_directories(rc.output.dir);
  const auto ckpt_path = rc.output.dir / "checkpoint.bin";
  const auto log_path = rc.output.dir / "train_log.jsonl";
  if (!args.resume.empty()) trainer.restore(load_checkpoint(args.resume));
  std::ofstream log(log_path, args.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open log file '" + log_path.string() + "'");

  std::unique_ptr<Denoiser<float>> shadow;  // EMA weights for periodic grids
  const auto start = std::chrono::steady_clock::now();
  while (trainer.iteration() < rc.train.max_iterations) {
    const double lr = trainer.current_learning_rate();
    const double loss = trainer.train_iteration(data);
    const Index it = trainer.iteration();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (it % rc.output.log_every == 0 || it == rc.train.max_iterations) {
      json rec{{"iteration", it}, {"loss", loss}, {"lr", lr}, {"wall_time", wall}};
      log << rec.dump() << "\n" << std::flush;
      std::cout << rec.dump() << "\n";
    }
    if (rc.output.checkpoint_every > 0 && it % rc.output.checkpoint_every == 0) {
      save_checkpoint(trainer.snapshot(), ckpt_path);
    }
    if (rc.output.sample_every > 0 && it % rc.output.sample_every == 0) {
      if (!shadow) shadow = make_backbone<float>(rc.backbone, rc.train.seed);
      copy_weights(*shadow, trainer.ema());
      const auto cond = sampling_conditioning(rc, rc.output.sample_count, std::nullopt, "");
      const auto result = draw_samples(*shadow, rc, rc.sampler, sched, rc.output.sample_count, cond ? &*cond : nullptr);
      emit_sample_grid(result.samples, rc.output.dir / ("samples_" + std::to_string(it) + ".png"), rc.output.grid_cols);
    }
  }
  save_checkpoint(trainer.snapshot(), ckpt_path);
  std::cout << json{{"checkpoint", ckpt_path.string()}, {"iteration", trainer.iteration()}}.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  ConfigSource source;
  std::string checkpoint;
  std::string out = "samples.png";
  Index count = 16;
  Index grid_cols = 0;
  bool ema = false;
  std::optional<Index> steps;
  std::optional<double> guidance_scale;
  std::optional<double> eta;
  std::optional<std::uint64_t> seed;
  std::string family;
  std::optional<Index> label;
  std::string text_key;
};

int cmd_sample(const SampleArgs& args) {
  RunConfig rc = args.source.load();
  SamplerSpec spec = rc.sampler;
  if (!args.family.empty()) {
    try {
      spec.family = parse_sampler_family(args.family);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--sampler: ") + e.what());
    }
  }
  if (args.steps) spec.num_steps = *args.steps;
  if (args.eta) spec.eta = *args.eta;
  if (args.seed) spec.seed = *args.seed;
  if (args.guidance_scale) {
    if (spec.guidance.mode == GuidanceMode::None) spec.guidance.mode = GuidanceMode::ClassifierFree;
    spec.guidance.scale = *args.guidance_scale;
  }
  rc.sampler = spec;
  rc.validate();
  if (args.count < 1) throw ConfigError("--count: must be >= 1");

  const NoiseSchedule sched = rc.schedule.build();
  auto model = make_backbone<float>(rc.backbone, rc.train.seed);
  if (!args.checkpoint.empty()) {
    Trainer<float> loader(*model, sched, rc.train, rc.model_signature());
    loader.restore(load_checkpoint(args.checkpoint));
    if (args.ema) loader.load_ema_into_model();
  } else if (args.ema) {
    throw ConfigError("--ema: needs --checkpoint");
  }
  const auto cond = sampling_conditioning(rc, args.count, args.label, args.text_key);
  const auto start = std::chrono::steady_clock::now();
  const auto result = draw_samples(*model, rc, spec, sched, args.count, cond ? &*cond : nullptr);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const std::filesystem::path out(args.out);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  const Index cols = args.grid_cols > 0 ? args.grid_cols : static_cast<Index>(std::ceil(std::sqrt(double(args.count))));
  emit_sample_grid(result.samples, out, cols);
  std::filesystem::path npy = out;
  npy.replace_extension(".npy");
  write_npy(result.samples, npy);
  std::cout << json{{"sampler", to_string(spec.family)},
                    {"steps", static_cast<Index>(result.timesteps.size())},
                    {"guidance", to_string(spec.guidance.mode)},
                    {"guidance_scale", spec.guidance.scale},
                    {"model_calls", result.model_calls},
                    {"png", out.string()},
                    {"npy", npy.string()},
                    {"wall_time", wall}}
                   .dump()
            << "\n";
  return kOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  ConfigSource source;
  bool as_json = false;
  bool cross_check = false;
  std::optional<double> assert_params;
  double tol = 0.10;
};

int cmd_inspect(const InspectArgs& args) {
  const RunConfig rc = args.source.load();
  const ModelReport report = count_report(rc.backbone);
  std::cout << (args.as_json ? report.to_json() + "\n" : report.to_text());
  int status = kOk;
  if (args.cross_check) {
    const auto layout = make_backbone<float>(rc.backbone, 0, /*materialize=*/false);
    const Index counted = layout->parameter_count();
    const bool ok = counted == report.total_parameters;
    std::cerr << "cross-check: config algebra " << report.total_parameters << ", parameter store " << counted
              << (ok ? " (match)" : " (MISMATCH)") << "\n";
    if (!ok) status = kRuntime;
  }
  if (args.assert_params) {
    const double target = *args.assert_params;
    const double rel = std::abs(double(report.total_parameters) - target) / target;
    const bool ok = rel <= args.tol;
    std::cerr << "assert-params: " << report.total_parameters << " vs " << static_cast<long long>(target)
              << " relative deviation " << rel << (ok ? " within " : " exceeds ") << "tolerance " << args.tol << "\n";
    if (!ok) return kValidation;
  }
  return status;
}

// ---------------------------------------------------------------- noise-demo

struct NoiseDemoArgs {
  ConfigSource source;
  std::string image;
  std::string timesteps = "0,100,250,500,750,999";
  std::string out = "noise_demo.png";
  std::uint64_t seed = 0;
};

int cmd_noise_demo(const NoiseDemoArgs& args) {
  const RunConfig rc = args.source.load();
  const NoiseSchedule sched = rc.schedule.build();
  std::vector<Index> steps;
  for (const auto& item : split_csv(args.timesteps)) {
    Index t = 0;
    try {
      t = std::stoll(item);
    } catch (const std::exception&) {
      throw ConfigError("--timesteps: '" + item + "' is not an integer");
    }
    if (t < 0 || t >= sched.num_steps()) {
      throw ConfigError("--timesteps: " + std::to_string(t) + " outside [0, " + std::to_string(sched.num_steps()) + ")");
    }
    steps.push_back(t);
  }
  if (steps.empty()) throw ConfigError("--timesteps: empty list");
  RgbImage img;
  try {
    img = read_png(args.image);
  } catch (const ImageIoError& e) {
    throw ConfigError(std::string("--image: ") + e.what());
  }
  const Tensor<float> x = image_to_tensor<float>(img);
  const Index K = static_cast<Index>(steps.size()), plane = x.size();
  Tensor<float> x0({K, 3, img.height, img.width});
  for (Index k = 0; k < K; ++k) std::copy(x.data(), x.data() + plane, x0.data() + k * plane);
  Rng rng(args.seed);
  const Tensor<float> eps = Tensor<float>::randn(x0.shape(), rng);
  const Tensor<float> panels = q_sample(x0, steps, eps, sched);
  emit_sample_grid(panels, args.out, K);
  for (Index k = 0; k < K; ++k) {
    Tensor<float> one({1, 3, img.height, img.width});
    std::copy(panels.data() + k * plane, panels.data() + (k + 1) * plane, one.data());
    json rec{{"t", steps[static_cast<std::size_t>(k)]}, {"alpha_bar", sched.alpha_bar(steps[static_cast<std::size_t>(k)])}};
    for (const auto& s : channel_stats(one)) rec["channels"].push_back({{"mean", s.mean}, {"std", s.stddev}});
    std::cout << rec.dump() << "\n";
  }
  return kOk;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == CheckpointErrorKind::ConfigMismatch ? kValidation : kRuntime;
  } catch (const std::invalid_argument& e) {  // ConfigError, DatasetError, validate() failures
    std::cerr << "invalid: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vitdiff: ViT-based diffusion models"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on an image folder");
  train.source.add_to(t);
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--data", train.data_dir, "Override data.dir");
  t->add_option("--out", train.out_dir, "Override output.dir");
  t->add_option("--max-iterations", train.max_iterations, "Override train.max_iterations");

  SampleArgs sample;
  auto* s = app.add_subcommand("sample", "Sample images from a checkpoint");
  sample.source.add_to(s);
  s->add_option("--checkpoint", sample.checkpoint, "Checkpoint file (omit for an untrained model)");
  s->add_option("-n,--count", sample.count, "Number of samples");
  s->add_option("-o,--out", sample.out, "Output PNG; a .npy dump is written next to it");
  s->add_option("--grid-cols", sample.grid_cols, "Grid columns (default: square)");
  s->add_flag("--ema", sample.ema, "Use EMA weights");
  s->add_option("--steps", sample.steps, "Sampling steps");
  s->add_option("--guidance-scale", sample.guidance_scale, "Guidance scale (enables classifier-free guidance)");
  s->add_option("--eta", sample.eta, "DDIM eta");
  s->add_option("--seed", sample.seed, "Sampler seed");
  s->add_option("--sampler", sample.family, "ancestral | ddim | em");
  s->add_option("--label", sample.label, "Class label for every sample");
  s->add_option("--text-key", sample.text_key, "Embedding-file key used as the prompt");

  InspectArgs inspect;
  auto* i = app.add_subcommand("inspect", "Print parameter / FLOP report");
  inspect.source.add_to(i);
  i->add_flag("--json", inspect.as_json, "Machine-readable output");
  i->add_flag("--cross-check", inspect.cross_check, "Compare against the parameter store");
  i->add_option("--assert-params", inspect.assert_params, "Expected parameter count");
  i->add_option("--tol", inspect.tol, "Relative tolerance for --assert-params");

  NoiseDemoArgs demo;
  auto* d = app.add_subcommand("noise-demo", "Forward-process strip of one image");
  demo.source.add_to(d);
  d->add_option("--image", demo.image, "Input PNG")->required();
  d->add_option("--timesteps", demo.timesteps, "Comma-separated timestep indices");
  d->add_option("-o,--out", demo.out, "Output PNG");
  d->add_option("--seed", demo.seed, "Noise seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  if (*t) return guarded([&] { return cmd_train(train); });
  if (*s) return guarded([&] { return cmd_sample(sample); });
  if (*i) return guarded([&] { return cmd_inspect(inspect); });
  return guarded([&] { return cmd_noise_demo(demo); });
}
