// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "support.hpp"
#include "vitdiff/checkpoint.hpp"
#include "vitdiff/config.hpp"
#include "vitdiff/eval.hpp"
#include "vitdiff/samplers.hpp"
#include "vitdiff/trainer.hpp"

using namespace vitdiff;
using namespace vitdiff::testing;

namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a failed expectation; the first few are kept for the report.
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (pass || failures < 4) detail << (detail.tellp() > 0 ? "; " : "") << "failed: " << what;
    pass = false;
    ++failures;
  }
  void note(const std::string& text) { detail << (detail.tellp() > 0 ? "; " : "") << text; }

  int failures = 0;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ------------------------------------------------------------------ 1

void parameter_counts(Outcome& o) {
  const std::pair<const char*, double> targets[] = {
      {"cifar10", 45e6}, {"celeba128", 442e6}, {"church256", 527e6}, {"cc12m64", 307e6}};
  for (const auto& [preset, target] : targets) {
    const auto cfg = load_preset(preset).backbone;
    const auto report = count_report(cfg);
    const double rel = std::abs(double(report.total_parameters) / target - 1.0);
    o.expect(rel <= 0.10, std::string(preset) + " off by " + fmt(rel * 100, 3) + "%");
    const auto layout = make_backbone<float>(cfg, 0, false);
    o.expect(layout->parameters().total_count() == report.total_parameters,
             std::string(preset) + " config algebra disagrees with the parameter store");
    o.note(std::string(preset) + " " + fmt(double(report.total_parameters) / 1e6, 4) + "M");
  }
}

// ------------------------------------------------------------------ 2

void gradients(Outcome& o) {
  auto run = [&](const std::string& label, Denoiser<double>& model, const ConditioningBundle<double>* cond) {
    randomize_parameters(model, 11, 0.2);
    const Index H = model.image_size();
    const auto x = random_tensor<double>({2, 3, H, H}, 12);
    const auto eps = random_tensor<double>(x.shape(), 13);
    const std::vector<double> ts{4.0, 40.0};
    auto loss = [&]() { return mse(model.forward(constant(x), ts, cond), constant(eps)); };
    double worst = 0.0;
    std::string worst_name;
    Index tensors = 0, inactive = 0;
    for (const auto& r : gradient_check(model, loss, 4, 14)) {
      ++tensors;
      const auto g = model.parameters().find(r.parameter)->grad();
      if ((g.array() * g.array()).sum() < 1e-18) {
        // Only a bias directly ahead of a one-channel-per-group normalization may be inert.
        o.expect(r.parameter.ends_with(".bias"), label + " " + r.parameter + " receives no gradient");
        ++inactive;
        continue;
      }
      if (r.relative_error > worst) {
        worst = r.relative_error;
        worst_name = r.parameter;
      }
    }
    o.expect(worst <= 1e-4, label + " " + worst_name + " relative error " + fmt(worst));
    o.note(label + " " + std::to_string(tensors) + " tensors, worst " + fmt(worst, 2) +
           (inactive ? ", " + std::to_string(inactive) + " normalized-away biases" : ""));
  };

  IUViT<double> iu(toy_iuvit(), 1);
  run("iuvit", iu, nullptr);
  ASCEND<double> as(toy_ascend(16), 1);
  run("ascend", as, nullptr);

  // Conditioning paths: labels plus masked text, one sample dropped.
  auto bundle = ConditioningBundle<double>::unconditional(2);
  bundle.labels = std::vector<Index>{1, 2};
  bundle.sequence = random_tensor<double>({2, 3, 4}, 5);
  bundle.mask = std::vector<std::uint8_t>{1, 1, 0, 1, 1, 1};
  bundle.dropped = {false, true};
  auto iu_cfg = toy_iuvit();
  iu_cfg.num_classes = 3;
  iu_cfg.cross_attention = true;
  iu_cfg.text_width = 4;
  iu_cfg.text_context = 3;
  IUViT<double> iu_cond(iu_cfg, 2);
  run("iuvit+cond", iu_cond, &bundle);
  auto as_cfg = toy_ascend(16);
  as_cfg.num_classes = 3;
  as_cfg.cross_attention = true;
  as_cfg.text_width = 4;
  as_cfg.text_context = 3;
  ASCEND<double> as_cond(as_cfg, 2);
  run("ascend+cond", as_cond, &bundle);
}

// ------------------------------------------------------------------ 3

void identities(Outcome& o) {
  auto fill = [](ParameterStore<double>& store, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& p : store)
      for (auto& v : p->value().values()) v = normal(rng);
  };

  {  // identity depthwise kernel
    ParameterStore<double> s1(1), s2(2);
    ConvFeedForward<double> conv(ParamScope<double>(s1).sub("ffn"), 6, 12, true);
    ConvFeedForward<double> plain(ParamScope<double>(s2).sub("ffn"), 6, 12, false);
    fill(s1, 5);
    for (auto& p : s2) p->value() = s1.find(p->name())->value();
    conv.dw_weight->value().set_zero();
    for (Index c = 0; c < 12; ++c) conv.dw_weight->value()[c * 9 + 4] = 1.0;
    conv.dw_bias->value().set_zero();
    const auto x = random_tensor<double>({2, 1 + 16, 6}, 6);
    o.expect(conv(constant(x), 1, 4, 4).value() == plain(constant(x), 1, 4, 4).value(),
             "identity-kernel DWConv FFN differs from the plain FFN");
  }
  {  // guidance identities
    Gen gen(3);
    const auto sched = make_linear_schedule(1000);
    for (int trial = 0; trial < 10; ++trial) {
      const auto u = random_tensor<double>({2, 3, 4, 4}, gen.seed());
      const auto c = random_tensor<double>({2, 3, 4, 4}, gen.seed());
      o.expect(cfg_combine(u, c, 0.0) == u, "cfg scale 0 is not the unconditional prediction");
      o.expect(cfg_combine(u, c, 1.0) == c, "cfg scale 1 is not the conditional prediction");
      const auto grad = random_tensor<double>(u.shape(), gen.seed());
      o.expect(classifier_guided_epsilon(u, grad, 0.0, gen.integer(0, 999), sched) == u,
               "classifier guidance with weight 0 changes epsilon");
    }
  }
  {  // one window covering the whole map is dense attention
    ParameterStore<double> store(1);
    WindowAttention<double> wa(ParamScope<double>(store), 8, 2, 4);
    fill(store, 2);
    const auto x = random_tensor<double>({2, 4, 4, 8}, 3);
    const auto got = wa(constant(x), 0).value();
    const Var<double> tokens = constant(x.reshaped({2, 16, 8}));
    const Var<double> packed = permute(reshape(wa.qkv(tokens), {2, 16, 3, 2, 4}), {2, 0, 3, 1, 4});
    auto part = [&](Index i) { return reshape(slice(packed, 0, i, 1), {4, 16, 4}); };
    AttentionOptions<double> opts;
    opts.heads = 2;
    opts.scale = 0.5;
    opts.bias = wa.relative_bias();
    const auto dense = wa.proj(merge_heads(attention(part(0), part(1), part(2), opts), 2)).value();
    const double err = max_abs_diff(got, dense.reshaped(x.shape()));
    o.expect(err <= 1e-6, "single-window attention differs from dense by " + fmt(err));
  }
  {  // layout roundtrips
    Gen gen(4);
    for (int trial = 0; trial < 10; ++trial) {
      const Index p = gen.pick(std::vector<Index>{1, 2, 4}), g = gen.integer(1, 4);
      const auto x = random_tensor<double>({2, 3, g * p, g * p}, gen.seed());
      o.expect(unpatchify(patchify(constant(x), p), p, g).value() == x, "patchify/unpatchify roundtrip");
      const Index s = gen.integer(0, 7);
      const auto m = random_tensor<double>({2, 8, 8, 3}, gen.seed());
      const auto back = roll2d(window_reverse(window_partition(roll2d(constant(m), -s, -s), 4), 4, 8, 8), s, s);
      o.expect(back.value() == m, "cyclic shift roundtrip");
    }
  }
}

// ------------------------------------------------------------------ 4

void schedule_properties(Outcome& o) {
  for (Index T : {2, 10, 1000, 4000}) {
    for (const auto& s : {make_linear_schedule(T), make_cosine_schedule(T)}) {
      for (Index t = 1; t < T; ++t)
        if (!(s.alpha_bar(t) < s.alpha_bar(t - 1))) {
          o.expect(false, "alpha_bar not strictly decreasing at T=" + std::to_string(T) + ", t=" + std::to_string(t));
          break;
        }
    }
  }
  Gen gen(5);
  double worst_inv = 0.0, worst_ddim = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto s = trial % 2 ? make_cosine_schedule(1000) : make_linear_schedule(1000);
    const auto x0 = random_tensor<double>({1, 3, 8, 8}, gen.seed());
    const auto eps = random_tensor<double>(x0.shape(), gen.seed());
    const Index t = gen.integer(0, 999);
    const auto xt = q_sample(x0, std::vector<Index>{t}, eps, s);
    const double ab = s.alpha_bar(t);
    for (Index i = 0; i < x0.size(); ++i) {
      const double rec = (xt[i] - std::sqrt(1 - ab) * eps[i]) / std::sqrt(ab);
      worst_inv = std::max(worst_inv, std::abs(rec - x0[i]) / std::max(1.0, std::abs(x0[i])));
    }
    const auto landed = ddim_step(xt, t, -1, eps, 0.0, s, Tensor<double>(x0.shape()));
    worst_ddim = std::max(worst_ddim, max_abs_diff(landed, x0) / std::max(1.0, max_abs(x0)));
  }
  o.expect(worst_inv <= 1e-5, "q_sample inversion error " + fmt(worst_inv));
  o.expect(worst_ddim <= 1e-5, "DDIM one-step x0 recovery error " + fmt(worst_ddim));

  // Zero-initialized output layers predict 0, so the loss is the mean of eps^2.
  Rng rng(6);
  const auto data = two_mode_images<double>(32, 8, 7);
  const auto eps = Tensor<double>::randn(data.shape(), rng);
  std::vector<Index> ts(32);
  for (auto& t : ts) t = std::uniform_int_distribution<Index>(0, 999)(rng);
  const auto xt = q_sample(data, ts, eps, make_linear_schedule(1000));
  const std::vector<double> tm(ts.begin(), ts.end());
  IUViT<double> iu(toy_iuvit(), 3);
  ASCEND<double> as(toy_ascend(8), 3);
  const double l_iu = epsilon_loss(iu.predict(xt, tm), eps), l_as = epsilon_loss(as.predict(xt, tm), eps);
  o.expect(std::abs(l_iu - 1.0) <= 0.05, "iuvit zero-prediction loss " + fmt(l_iu));
  o.expect(std::abs(l_as - 1.0) <= 0.05, "ascend zero-prediction loss " + fmt(l_as));
  o.note("inversion " + fmt(worst_inv, 2) + ", ddim recovery " + fmt(worst_ddim, 2) + ", zero-prediction loss " +
         fmt(l_iu, 4) + "/" + fmt(l_as, 4));
}

// ------------------------------------------------------------------ 5

struct SmokeResult {
  double first_loss = 0.0;
  double final_loss = 0.0;  // mean of the last 10 steps
  std::vector<ChannelStats> sample_stats;
};

SmokeResult smoke_train(const RunConfig& rc, const Tensor<float>& images, Index steps, Index samples) {
  const auto sched = rc.schedule.build();
  auto model = make_backbone<float>(rc.backbone, rc.train.seed);
  Dataset<float> data;
  data.images = images;
  for (Index i = 0; i < images.dim(0); ++i) data.keys.push_back(std::to_string(i));
  auto cfg = rc.train;
  cfg.max_iterations = steps;
  Trainer<float> trainer(*model, sched, cfg);
  SmokeResult r;
  double tail = 0.0;
  for (Index i = 0; i < steps; ++i) {
    const double loss = trainer.train_iteration(data);
    if (i == 0) r.first_loss = loss;
    if (i >= steps - 10) tail += loss;
  }
  r.final_loss = tail / 10.0;
  if (samples > 0) {
    trainer.load_ema_into_model();
    const EpsilonModel<float> eps = [&](const Tensor<float>& x, std::span<const double> t,
                                        const ConditioningBundle<float>* c) { return model->predict(x, t, c); };
    const Index n = model->image_size();
    r.sample_stats = channel_stats(run_sampler<float>(eps, rc.sampler, sched, {samples, 3, n, n}).samples);
  }
  return r;
}

void smoke_training(Outcome& o) {
  const auto images = two_mode_images<float>(512, 8, 21);
  const auto data_stats = channel_stats(images);
  for (const char* preset : {"toy_iuvit", "toy_ascend"}) {
    const auto r = smoke_train(load_preset(preset), images, 200, 500);
    o.expect(r.final_loss < 0.5, std::string(preset) + " final loss " + fmt(r.final_loss));
    double worst = 0.0;
    for (std::size_t c = 0; c < 3; ++c) worst = std::max(worst, std::abs(r.sample_stats[c].mean - data_stats[c].mean));
    o.expect(worst <= 0.1, std::string(preset) + " sample channel mean off by " + fmt(worst));
    o.note(std::string(preset) + " loss " + fmt(r.first_loss, 3) + " -> " + fmt(r.final_loss, 3) +
           ", worst channel-mean gap " + fmt(worst, 3));
  }
}

// ------------------------------------------------------------------ 6

void ablation_arms(Outcome& o) {
  const auto images = two_mode_images<float>(64, 8, 22);
  auto arm = [&](const std::string& label, const BackboneConfig& backbone, const char* preset) {
    auto rc = load_preset(preset);
    rc.backbone = backbone;
    rc.sampler.num_steps = 5;
    const auto model = make_backbone<float>(backbone, 0);
    const auto x = random_tensor<float>({2, 3, 8, 8}, 3);
    const auto y = model->predict(x, std::vector<double>{1.0, 500.0});
    o.expect(y.shape() == x.shape(), label + " output shape");
    const auto r = smoke_train(rc, images, 5, 4);
    o.expect(std::isfinite(r.final_loss) && std::isfinite(r.sample_stats[0].mean), label + " non-finite smoke run");
  };
  const auto iu = std::get<IUViTConfig>(load_preset("toy_iuvit").backbone);
  for (auto head : {HeadMode::RearrangeFirst, HeadMode::LinearFirst})
    for (bool dw : {true, false}) {
      auto c = iu;
      c.head_mode = head;
      c.use_dwconv_ffn = dw;
      arm(std::string("iuvit ") + (head == HeadMode::RearrangeFirst ? "rearrange-first" : "linear-first") +
              (dw ? "+dwconv" : "+mlp"),
          c, "toy_iuvit");
    }
  const auto as = std::get<ASCENDConfig>(load_preset("toy_ascend").backbone);
  std::vector<std::pair<std::string, ASCENDConfig>> arms;
  arms.emplace_back("ascend baseline", as);
  arms.emplace_back("ascend patch-merge", as);
  arms.back().second.resample_mode = ResampleMode::PatchMergeExpand;
  arms.emplace_back("ascend reduced-skips", as);
  arms.back().second.skip_mode = SkipMode::Reduced;
  arms.emplace_back("ascend swin/swin", as);
  arms.back().second.decoder_block = BlockKind::Swin;
  arms.emplace_back("ascend conv/swin", as);
  arms.back().second.encoder_block = BlockKind::Conv;
  arms.back().second.decoder_block = BlockKind::Swin;
  for (const auto& [label, c] : arms) arm(label, c, "toy_ascend");
  o.note("4 iuvit arms, 5 ascend arms");
}

// ------------------------------------------------------------------ 7

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void determinism(Outcome& o) {
  const auto rc = load_preset("toy_iuvit");
  const auto sched = rc.schedule.build();
  const auto images = two_mode_images<float>(64, 8, 23);
  Dataset<float> data;
  data.images = images;
  auto trajectory = [&](Index steps) {
    auto model = make_backbone<float>(rc.backbone, rc.train.seed);
    Trainer<float> trainer(*model, sched, rc.train, rc.model_signature());
    std::vector<double> losses;
    for (Index i = 0; i < steps; ++i) losses.push_back(trainer.train_iteration(data));
    return losses;
  };
  o.expect(trajectory(30) == trajectory(30), "fixed-seed loss trajectories differ");

  const auto dir = fs::temp_directory_path() / "vitdiff_acceptance";
  fs::create_directories(dir);
  auto model = make_backbone<float>(rc.backbone, rc.train.seed);
  Trainer<float> trainer(*model, sched, rc.train, rc.model_signature());
  for (int i = 0; i < 10; ++i) trainer.train_iteration(data);
  save_checkpoint(trainer.snapshot(), dir / "resume.bin");
  const double expected = trainer.train_iteration(data);
  auto fresh = make_backbone<float>(rc.backbone, rc.train.seed + 1);
  Trainer<float> resumed(*fresh, sched, rc.train, rc.model_signature());
  resumed.restore(load_checkpoint(dir / "resume.bin"));
  const double got = resumed.train_iteration(data);
  o.expect(got == expected, "resumed next-step loss " + fmt(got, 17) + " vs " + fmt(expected, 17));

  SamplerSpec spec = rc.sampler;
  spec.family = SamplerFamily::DDIM;
  spec.eta = 0.0;
  spec.num_steps = 20;
  spec.seed = 5;
  const EpsilonModel<float> eps = [&](const Tensor<float>& x, std::span<const double> t,
                                      const ConditioningBundle<float>* c) { return model->predict(x, t, c); };
  auto draw = [&](const std::string& name) {
    const auto r = run_sampler<float>(eps, spec, sched, {8, 3, 8, 8});
    emit_sample_grid(r.samples, dir / (name + ".png"), 4);
    write_npy(r.samples, dir / (name + ".npy"));
    return file_bytes(dir / (name + ".png")) + file_bytes(dir / (name + ".npy"));
  };
  o.expect(draw("a") == draw("b"), "DDIM eta=0 outputs differ between runs");
  o.note("trajectory, resume and DDIM bytes reproduced");
}

// ------------------------------------------------------------------ 8

void guidance_accounting(Outcome& o) {
  auto cfg = toy_iuvit();
  cfg.num_classes = 2;
  IUViT<float> model(cfg, 4);
  randomize_parameters(model, 5, 0.1);
  const auto sched = make_linear_schedule(1000);
  Index calls = 0;
  const EpsilonModel<float> eps = [&](const Tensor<float>& x, std::span<const double> t,
                                      const ConditioningBundle<float>* c) {
    ++calls;
    return model.predict(x, t, c);
  };
  auto bundle = ConditioningBundle<float>::unconditional(2);
  bundle.labels = std::vector<Index>{0, 1};
  bundle.dropped = {false, false};
  for (auto family : {SamplerFamily::DDIM, SamplerFamily::Ancestral, SamplerFamily::EulerMaruyama}) {
    for (bool guided : {true, false}) {
      SamplerSpec spec;
      spec.family = family;
      spec.num_steps = 50;
      spec.guidance.mode = guided ? GuidanceMode::ClassifierFree : GuidanceMode::None;
      spec.guidance.scale = 3.0;
      calls = 0;
      const auto r = run_sampler<float>(eps, spec, sched, {2, 3, 8, 8}, &bundle);
      const Index expected = guided ? 100 : 50;
      o.expect(calls == expected && r.model_calls == expected,
               to_string(family) + (guided ? " guided " : " unguided ") + std::to_string(calls) + " calls");
    }
  }
  o.note("2 evaluations per step guided, 1 unguided, for ddim/ancestral/em");
}

}  // namespace

int main() {
  const std::pair<const char*, void (*)(Outcome&)> criteria[] = {
      {"parameter counts of the published presets", parameter_counts},
      {"finite-difference gradients of the toy backbones", gradients},
      {"exact identities", identities},
      {"schedule and process properties", schedule_properties},
      {"smoke training on the two-mode dataset", smoke_training},
      {"ablation arms instantiate, forward and train", ablation_arms},
      {"determinism and persistence", determinism},
      {"guidance accounting", guidance_accounting},
  };
  int failed = 0;
  int index = 0;
  for (const auto& [name, fn] : criteria) {
    ++index;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << index << ": " << name << " [" << o.detail.str()
              << "] (" << fmt(secs, 3) << " s)" << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
