// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "support.hpp"
#include "vitdiff/config.hpp"
#include "vitdiff/diffusion.hpp"

using namespace vitdiff;
using namespace vitdiff::testing;

namespace {

void fill_random(ParameterStore<double>& store, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& p : store)
    for (auto& v : p->value().values()) v = normal(rng);
}

Tensor<double> matvec_rows(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b) {
  // x [M, in], w [out, in] -> [M, out]
  const Index M = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<double> y({M, out});
  for (Index m = 0; m < M; ++m)
    for (Index o = 0; o < out; ++o) {
      double acc = b ? (*b)[o] : 0.0;
      for (Index i = 0; i < in; ++i) acc += x[m * in + i] * w[o * in + i];
      y[m * out + o] = acc;
    }
  return y;
}

ConditioningBundle<double> text_bundle(Index B, Index L, Index D, std::uint64_t seed, bool drop_last) {
  ConditioningBundle<double> c;
  c.sequence = random_tensor<double>({B, L, D}, seed);
  c.mask = std::vector<std::uint8_t>(static_cast<std::size_t>(B * L), 1);
  (*c.mask)[static_cast<std::size_t>(L - 1)] = 0;  // first sample has a padded tail
  c.dropped.assign(static_cast<std::size_t>(B), false);
  if (drop_last) c.dropped.back() = true;
  return c;
}

struct GradSummary {
  double worst = 0.0;
  std::string worst_name;
  std::vector<std::string> inactive;
  std::size_t tensors = 0;
};

GradSummary check_model_gradients(Denoiser<double>& model, const ConditioningBundle<double>* cond, std::uint64_t seed) {
  const Index B = 2, H = model.image_size();
  const auto x = random_tensor<double>({B, 3, H, H}, seed);
  const auto eps = random_tensor<double>({B, 3, H, H}, seed + 1);
  const std::vector<double> ts{3.0, 17.0};
  auto loss = [&]() { return mse(model.forward(constant(x), ts, cond), constant(eps)); };
  GradSummary s;
  for (const auto& r : gradient_check(model, loss, 6, seed + 2)) {
    ++s.tensors;
    const Parameter<double>* p = model.parameters().find(r.parameter);
    const double gnorm = std::sqrt((p->grad().array() * p->grad().array()).sum());
    if (gnorm < 1e-9) {
      s.inactive.push_back(r.parameter);
      continue;
    }
    if (r.relative_error > s.worst) {
      s.worst = r.relative_error;
      s.worst_name = r.parameter;
    }
  }
  return s;
}

}  // namespace

TEST_SUITE("iuvit") {
  TEST_CASE("config validation names the field") {
    auto c = toy_iuvit();
    c.patch_size = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("patch_size"), std::invalid_argument);
    c = toy_iuvit();
    c.num_heads = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("num_heads"), std::invalid_argument);
    c = toy_iuvit();
    c.patch_size = 4;
    c.hidden_size = 24;
    c.num_heads = 2;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("head_mode"), std::invalid_argument);
    c.head_mode = HeadMode::LinearFirst;
    CHECK_NOTHROW(c.validate());
    c = toy_iuvit();
    c.depth = 4;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("depth"), std::invalid_argument);
    c = toy_iuvit();
    c.cross_attention = true;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("text_width"), std::invalid_argument);
  }

  TEST_CASE("sinusoidal features match the formula") {
    std::vector<double> ts;
    for (int t = 0; t < 10; ++t) ts.push_back(t);
    const auto e = sinusoidal_embedding<double>(ts, 8);
    for (Index t = 0; t < 10; ++t)
      for (Index i = 0; i < 4; ++i) {
        const double f = std::pow(10000.0, -double(i) / 4.0);
        CHECK(e[t * 8 + i] == doctest::Approx(std::cos(double(t) * f)).epsilon(1e-14));
        CHECK(e[t * 8 + 4 + i] == doctest::Approx(std::sin(double(t) * f)).epsilon(1e-14));
        CHECK(e[t * 8 + i] * e[t * 8 + i] + e[t * 8 + 4 + i] * e[t * 8 + 4 + i] == doctest::Approx(1.0).epsilon(1e-14));
      }
    const auto odd = sinusoidal_embedding<double>(ts, 7);
    for (Index t = 0; t < 10; ++t) CHECK(odd[t * 7 + 6] == 0.0);
  }

  TEST_CASE("timestep embedder is deterministic and separates timesteps") {
    ParameterStore<double> store(3);
    TimestepEmbedder<double> embed(ParamScope<double>(store), 16, 32, 16);
    fill_random(store, 4);
    const std::vector<double> a{5.0}, b{6.0};
    const auto ea = embed(a).value(), ea2 = embed(a).value(), eb = embed(b).value();
    CHECK(ea == ea2);
    CHECK(max_abs_diff(ea, eb) > 1e-6);
  }

  TEST_CASE("identity depthwise kernel reduces to the plain feed-forward") {
    ParameterStore<double> s1(1), s2(2);
    ConvFeedForward<double> conv(ParamScope<double>(s1).sub("ffn"), 6, 12, true);
    ConvFeedForward<double> plain(ParamScope<double>(s2).sub("ffn"), 6, 12, false);
    fill_random(s1, 5);
    for (auto& p : s2) p->value() = s1.find(p->name())->value();
    auto& k = conv.dw_weight->value();
    k.set_zero();
    for (Index c = 0; c < 12; ++c) k[c * 9 + 4] = 1.0;
    conv.dw_bias->value().set_zero();
    const auto x = random_tensor<double>({2, 1 + 9, 6}, 6);
    const auto a = conv(constant(x), 1, 3, 3).value(), b = plain(constant(x), 1, 3, 3).value();
    CHECK(a == b);
    CHECK(a.shape() == x.shape());
    CHECK_THROWS_AS(conv(constant(x), 1, 4, 4), ShapeError);
  }

  TEST_CASE("depthwise feed-forward matches a direct loop") {
    ParameterStore<double> store(1);
    ConvFeedForward<double> ffn(ParamScope<double>(store), 3, 5, true);
    fill_random(store, 7);
    const Index B = 2, extra = 2, g = 4, N = extra + g * g;
    const auto x = random_tensor<double>({B, N, 3}, 8);
    const auto got = ffn(constant(x), extra, g, g).value();

    const auto h = matvec_rows(x.reshaped({B * N, 3}), ffn.fc1.weight->value(), &ffn.fc1.bias->value());
    Tensor<double> conv = h;
    const auto& w = ffn.dw_weight->value();
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < 5; ++c)
        for (Index y = 0; y < g; ++y)
          for (Index xx = 0; xx < g; ++xx) {
            double acc = ffn.dw_bias->value()[c];
            for (Index u = -1; u <= 1; ++u)
              for (Index v = -1; v <= 1; ++v) {
                const Index yy = y + u, xv = xx + v;
                if (yy < 0 || yy >= g || xv < 0 || xv >= g) continue;
                acc += h[(b * N + extra + yy * g + xv) * 5 + c] * w[c * 9 + (u + 1) * 3 + (v + 1)];
              }
            conv[(b * N + extra + y * g + xx) * 5 + c] = acc;
          }
    const auto act = gelu(constant(conv)).value();
    const auto want = matvec_rows(act, ffn.fc2.weight->value(), &ffn.fc2.bias->value());
    CHECK(max_abs_diff(got.reshaped({B * N, 3}), want) < 1e-12);
  }

  TEST_CASE("single-token self-attention returns the projected value") {
    ParameterStore<double> store(1);
    SelfAttention<double> attn(ParamScope<double>(store), 4, 2, false);
    fill_random(store, 9);
    const auto x = random_tensor<double>({3, 1, 4}, 10);
    const auto got = attn(constant(x)).value();
    // v occupies rows [2C, 3C) of the fused projection
    Tensor<double> wv({4, 4});
    for (Index i = 0; i < 16; ++i) wv[i] = attn.qkv.weight->value()[32 + i];
    const auto v = matvec_rows(x.reshaped({3, 4}), wv, nullptr);
    const auto want = matvec_rows(v, attn.proj.weight->value(), &attn.proj.bias->value());
    CHECK(max_abs_diff(got.reshaped({3, 4}), want) < 1e-12);
  }

  TEST_CASE("long skip merge") {
    auto cfg = toy_iuvit();
    ParameterStore<double> store(1);
    IUViTBlock<double> block(ParamScope<double>(store), cfg, true);
    const Index C = cfg.hidden_size;
    const auto deep = random_tensor<double>({2, 5, C}, 1), shallow = random_tensor<double>({2, 5, C}, 2);
    auto& w = block.skip_proj.weight->value();
    block.skip_proj.bias->value().set_zero();
    w.set_zero();
    for (Index i = 0; i < C; ++i) w[i * 2 * C + i] = 1.0;
    CHECK(block.merge_skip(constant(deep), constant(shallow)).value() == deep);
    w.set_zero();
    for (Index i = 0; i < C; ++i) w[i * 2 * C + C + i] = 1.0;
    CHECK(block.merge_skip(constant(deep), constant(shallow)).value() == shallow);

    fill_random(store, 3);
    Tensor<double> cat({10, 2 * C});
    for (Index r = 0; r < 10; ++r)
      for (Index c = 0; c < C; ++c) {
        cat[r * 2 * C + c] = deep[r * C + c];
        cat[r * 2 * C + C + c] = shallow[r * C + c];
      }
    const auto want = matvec_rows(cat, block.skip_proj.weight->value(), &block.skip_proj.bias->value());
    CHECK(max_abs_diff(block.merge_skip(constant(deep), constant(shallow)).value().reshaped({10, C}), want) < 1e-12);
    CHECK_THROWS_AS(block.merge_skip(constant(deep), constant(Tensor<double>({2, 4, C}))), ShapeError);
  }

  TEST_CASE("cross-attention is inert at initialization and for fully masked text") {
    auto cfg = toy_iuvit();
    cfg.cross_attention = true;
    cfg.text_width = 6;
    cfg.text_context = 3;
    ParameterStore<double> store(1);
    const ParamScope<double> scope(store);
    IUViTBlock<double> block(scope.sub("block"), cfg, false);
    TextConditioner<double> text(scope.sub("text"), 6, cfg.hidden_size);
    const Index extra = 1, g = 4;
    const auto x = random_tensor<double>({2, extra + g * g, cfg.hidden_size}, 2);
    auto bundle = text_bundle(2, 3, 6, 3, false);
    auto self_only = [&](const Var<double>& in) {
      const Var<double> h = add(in, block.attn(block.norm1(in)));
      return add(h, block.ffn(block.norm3(h), extra, g, g)).value();
    };
    auto ctx = text.prepare(&bundle, 2, 3);
    CHECK(block(constant(x), &ctx, extra, g).value() == self_only(constant(x)));

    fill_random(store, 4);  // cross-attention now live, projection bias included
    ctx = text.prepare(&bundle, 2, 3);
    CHECK(max_abs_diff(block(constant(x), &ctx, extra, g).value(), self_only(constant(x))) > 1e-6);
    std::fill(ctx.key_mask.begin(), ctx.key_mask.end(), std::uint8_t{0});
    CHECK(max_abs_diff(block(constant(x), &ctx, extra, g).value(), self_only(constant(x))) == 0.0);
    CHECK_THROWS(block(constant(x), nullptr, extra, g));

    auto wide = text_bundle(2, 3, 7, 5, false);
    CHECK_THROWS_AS(text.prepare(&wide, 2, 3), ShapeError);
  }

  TEST_CASE("rearrange-first layout is a bijection with the documented indexing") {
    const Index p = 2, grid = 2, C = 8, D = C / (p * p);
    for (Index tok = 0; tok < grid * grid; ++tok)
      for (Index c = 0; c < C; ++c) {
        Tensor<double> t({1, grid * grid, C});
        t[tok * C + c] = 1.0;
        const auto img = unpatchify(constant(t), p, grid).value();
        REQUIRE(img.shape() == Shape{1, D, grid * p, grid * p});
        const Index oc = c / (p * p), dy = (c % (p * p)) / p, dx = c % p;
        const Index y = (tok / grid) * p + dy, x = (tok % grid) * p + dx;
        REQUIRE(img[(oc * grid * p + y) * grid * p + x] == 1.0);
        REQUIRE(max_abs(img) == 1.0);
        double total = 0;
        for (Index i = 0; i < img.size(); ++i) total += img[i];
        REQUIRE(total == 1.0);
      }
  }

  TEST_CASE("head shapes for both modes") {
    for (auto mode : {HeadMode::RearrangeFirst, HeadMode::LinearFirst}) {
      auto cfg = toy_iuvit();
      cfg.head_mode = mode;
      IUViT<float> model(cfg, 1);
      const auto out = model.predict(random_tensor<float>({3, 3, 8, 8}, 1), std::vector<double>{1, 2, 3});
      CHECK(out.shape() == Shape{3, 3, 8, 8});
    }
    const auto cifar = std::get<IUViTConfig>(load_preset("cifar10").backbone);
    IUViT<float> big(cifar, 0, false);
    CHECK(big.head_conv().weight->shape() == Shape{3, 128, 3, 3});
  }

  TEST_CASE("token count and width are constant across blocks") {
    auto cfg = toy_iuvit();
    IUViT<double> model(cfg, 1);
    const Index extra = cfg.extra_tokens(), g = cfg.grid();
    Var<double> x = constant(random_tensor<double>({2, extra + g * g, cfg.hidden_size}, 2));
    for (const auto& block : model.blocks()) {
      const Var<double> y = block(x, nullptr, extra, g);
      REQUIRE(y.shape() == x.shape());
      x = y;
    }
    CHECK(model.features(constant(random_tensor<double>({2, 3, 8, 8}, 3)), std::vector<double>{0, 1}, nullptr).shape() ==
          Shape{2, g * g, cfg.hidden_size});
  }

  TEST_CASE("zero-initialized head gives zero output and unit loss") {
    IUViT<double> model(toy_iuvit(), 7);
    const auto x = random_tensor<double>({4, 3, 8, 8}, 1);
    CHECK(max_abs(model.predict(x, std::vector<double>{0, 10, 100, 999})) == 0.0);
  }

  TEST_CASE("seeded construction is deterministic") {
    IUViT<float> a(toy_iuvit(), 11), b(toy_iuvit(), 11), c(toy_iuvit(), 12);
    randomize_parameters(a, 1);
    randomize_parameters(b, 1);
    const auto x = random_tensor<float>({2, 3, 8, 8}, 5);
    const std::vector<double> ts{4, 9};
    CHECK(a.predict(x, ts) == b.predict(x, ts));
    IUViT<float> d(toy_iuvit(), 11);
    bool same = true;
    for (std::size_t i = 0; i < d.parameters().size(); ++i) same = same && d.parameters()[i].value() == c.parameters()[i].value();
    CHECK_FALSE(same);
  }

  TEST_CASE("preset parameter counts") {
    const std::pair<const char*, double> expected[] = {
        {"cifar10", 45e6}, {"celeba128", 442e6}, {"church256", 527e6}, {"cc12m64", 307e6}};
    for (const auto& [name, target] : expected) {
      const auto cfg = load_preset(name).backbone;
      const auto model = make_backbone<float>(cfg, 0, false);
      const double count = static_cast<double>(model->parameter_count());
      INFO(name << ": " << count);
      CHECK(std::abs(count - target) / target <= 0.10);
    }
  }

  TEST_CASE("rejects malformed inputs") {
    IUViT<float> model(toy_iuvit(), 1);
    CHECK_THROWS_AS(model.predict(Tensor<float>({1, 3, 16, 16}), std::vector<double>{0}), ShapeError);
    CHECK_THROWS_AS(model.predict(Tensor<float>({2, 3, 8, 8}), std::vector<double>{0}), ShapeError);
  }

  TEST_CASE("gradients match finite differences") {
    SUBCASE("unconditional, both ablation axes") {
      for (auto mode : {HeadMode::RearrangeFirst, HeadMode::LinearFirst})
        for (bool dw : {true, false}) {
          auto cfg = toy_iuvit();
          cfg.head_mode = mode;
          cfg.use_dwconv_ffn = dw;
          IUViT<double> model(cfg, 1);
          randomize_parameters(model, 2);
          const auto s = check_model_gradients(model, nullptr, 3);
          INFO("worst " << s.worst_name << " " << s.worst);
          CHECK(s.worst <= 1e-4);
          CHECK(s.inactive.empty());
        }
    }
    SUBCASE("class labels with one dropped sample") {
      auto cfg = toy_iuvit();
      cfg.num_classes = 3;
      IUViT<double> model(cfg, 1);
      randomize_parameters(model, 4);
      auto bundle = ConditioningBundle<double>::unconditional(2);
      bundle.labels = std::vector<Index>{2, 0};
      bundle.dropped = {false, true};
      const auto s = check_model_gradients(model, &bundle, 5);
      INFO("worst " << s.worst_name << " " << s.worst);
      CHECK(s.worst <= 1e-4);
      CHECK(s.inactive.empty());
    }
    SUBCASE("text cross-attention with masking and dropout") {
      auto cfg = toy_iuvit();
      cfg.cross_attention = true;
      cfg.text_width = 6;
      cfg.text_context = 3;
      IUViT<double> model(cfg, 1);
      randomize_parameters(model, 6);
      const auto bundle = text_bundle(2, 3, 6, 7, true);
      const auto s = check_model_gradients(model, &bundle, 8);
      INFO("worst " << s.worst_name << " " << s.worst);
      CHECK(s.worst <= 1e-4);
      CHECK(s.inactive.empty());
    }
  }
}
