// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "vitdiff/ascend.hpp"
#include "vitdiff/conditioning.hpp"
#include "vitdiff/iuvit.hpp"

using namespace vitdiff;
using namespace vitdiff::testing;

namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "vitdiff_conditioning_test";
  fs::create_directories(dir);
  return dir / name;
}

ConditioningBundle<double> full_bundle(Index B, std::uint64_t seed) {
  ConditioningBundle<double> c;
  c.pooled = random_tensor<double>({B, 5}, seed);
  c.sequence = random_tensor<double>({B, 3, 4}, seed + 1);
  c.mask = std::vector<std::uint8_t>(static_cast<std::size_t>(B * 3), 1);
  c.labels = std::vector<Index>(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) (*c.labels)[b] = b % 7;
  c.dropped.assign(static_cast<std::size_t>(B), false);
  return c;
}

// FNV-1a over the raw float bytes, computed independently of the loader.
std::uint64_t fnv1a(std::span<const float> v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (float f : v) {
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    for (unsigned char c : b) h = (h ^ c) * 1099511628211ULL;
  }
  return h;
}

EmbeddingFileErrorKind load_error_kind(const fs::path& p, Index ctx = 0, Index width = 0) {
  try {
    load_embedding_file(p, ctx, width);
  } catch (const EmbeddingFileError& e) {
    return e.kind();
  }
  FAIL("load succeeded unexpectedly");
  return EmbeddingFileErrorKind::Io;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE("conditioning") {
  TEST_CASE("dropout with p = 0 leaves the bundle unchanged") {
    const auto in = full_bundle(16, 1);
    Rng rng(3);
    const auto out = apply_conditioning_dropout(in, 0.0, rng, 7);
    CHECK(*out.pooled == *in.pooled);
    CHECK(*out.sequence == *in.sequence);
    CHECK(*out.mask == *in.mask);
    CHECK(*out.labels == *in.labels);
    for (Index b = 0; b < 16; ++b) CHECK_FALSE(out.is_dropped(b));
  }

  TEST_CASE("dropout with p = 1 nulls every sample") {
    const auto in = full_bundle(8, 2);
    Rng rng(4);
    const auto out = apply_conditioning_dropout(in, 1.0, rng, 7);
    for (Index b = 0; b < 8; ++b) {
      CHECK(out.is_dropped(b));
      CHECK((*out.labels)[b] == 7);
    }
    CHECK(max_abs(*out.pooled) == 0.0);
    CHECK(max_abs(*out.sequence) == 0.0);
    for (auto m : *out.mask) CHECK(m == 0);
  }

  TEST_CASE("dropout rate matches p over many samples") {
    const Index N = 100000;
    auto bundle = ConditioningBundle<double>::unconditional(N);
    bundle.dropped.assign(static_cast<std::size_t>(N), false);
    Rng rng(11);
    const auto out = apply_conditioning_dropout(bundle, 0.1, rng);
    Index dropped = 0;
    for (Index b = 0; b < N; ++b) dropped += out.is_dropped(b) ? 1 : 0;
    CHECK(std::abs(static_cast<double>(dropped) / N - 0.1) <= 0.005);
  }

  TEST_CASE("dropout is reproducible from the seed and keeps prior drops") {
    auto in = full_bundle(64, 5);
    in.dropped[3] = true;
    Rng a(42), b(42), c(43);
    const auto x = apply_conditioning_dropout(in, 0.5, a, 7);
    const auto y = apply_conditioning_dropout(in, 0.5, b, 7);
    const auto z = apply_conditioning_dropout(in, 0.5, c, 7);
    CHECK(x.dropped == y.dropped);
    CHECK(*x.pooled == *y.pooled);
    CHECK(*x.labels == *y.labels);
    CHECK(x.dropped != z.dropped);
    CHECK(x.is_dropped(3));
  }

  TEST_CASE("dropout rejects probabilities outside [0, 1]") {
    const auto in = full_bundle(2, 1);
    Rng rng(0);
    CHECK_THROWS_AS(apply_conditioning_dropout(in, -0.1, rng), std::invalid_argument);
    CHECK_THROWS_AS(apply_conditioning_dropout(in, 1.5, rng), std::invalid_argument);
  }

  TEST_CASE("bundle validation pairs mask with sequence") {
    auto c = full_bundle(2, 1);
    c.mask.reset();
    CHECK_THROWS(c.validate());
    auto d = full_bundle(2, 1);
    d.labels = std::vector<Index>{1};
    CHECK_THROWS(d.validate());
  }

  TEST_CASE("pooled text is the masked mean of sequence rows") {
    ConditioningBundle<double> c;
    c.sequence = Tensor<double>({2, 3, 2}, {1, 2, 3, 4, 100, 100, 5, 6, 7, 8, 9, 10});
    c.mask = std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0};
    c.dropped = {false, false};
    const auto p = pooled_text(c);
    REQUIRE(p.shape() == Shape{2, 2});
    CHECK(p[0] == 2.0);
    CHECK(p[1] == 3.0);
    CHECK(p[2] == 0.0);
    CHECK(p[3] == 0.0);

    c.pooled = Tensor<double>({2, 2}, 9.0);
    CHECK(pooled_text(c) == *c.pooled);
  }

  TEST_CASE("embedding file roundtrip is bit exact") {
    EmbeddingTable t(4, 8);
    std::vector<float> a(32), b(32);
    for (int i = 0; i < 32; ++i) {
      a[i] = 0.25f * static_cast<float>(i) - 3.0f;
      b[i] = i % 2 ? -0.0f : std::numeric_limits<float>::denorm_min() * static_cast<float>(i);
    }
    t.add("img_000", a);
    t.add("img_001", b);
    const auto path = scratch("small.dbem");
    save_embedding_file(t, path);
    const auto back = load_embedding_file(path, 4, 8);
    REQUIRE(back.size() == 2);
    CHECK(back.keys() == t.keys());
    for (const auto* key : {"img_000", "img_001"}) {
      const auto r0 = t.row(key), r1 = back.row(key);
      CHECK(std::memcmp(r0.data(), r1.data(), 32 * sizeof(float)) == 0);
    }
    const std::vector<std::string> keys{"img_001", "img_000"};
    const auto g = back.gather<double>(keys);
    REQUIRE(g.shape() == Shape{2, 4, 8});
    CHECK(g[0] == static_cast<double>(b[0]));
    CHECK(g[32 + 5] == static_cast<double>(a[5]));
  }

  TEST_CASE("header layout is little-endian with the documented fields") {
    EmbeddingTable t(2, 3);
    t.add("k", std::vector<float>(6, 1.0f));
    const auto path = scratch("layout.dbem");
    save_embedding_file(t, path);
    const auto bytes = slurp(path);
    REQUIRE(bytes.size() == 4 + 16 + 2 + 1 + 24);
    CHECK(bytes.substr(0, 4) == "DBEM");
    auto u32 = [&](std::size_t off) {
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
      return v;
    };
    CHECK(u32(4) == 1);
    CHECK(u32(8) == 1);
    CHECK(u32(12) == 2);
    CHECK(u32(16) == 3);
    CHECK(static_cast<unsigned char>(bytes[20]) == 1);
    CHECK(static_cast<unsigned char>(bytes[21]) == 0);
    CHECK(bytes[22] == 'k');
  }

  TEST_CASE("checksum survives write and read of many random rows") {
    const Index ctx = 3, width = 5, N = 1000;
    EmbeddingTable t(ctx, width);
    Rng rng(17);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> all;
    for (Index i = 0; i < N; ++i) {
      std::vector<float> row(static_cast<std::size_t>(ctx * width));
      for (auto& v : row) v = normal(rng);
      all.insert(all.end(), row.begin(), row.end());
      t.add("sample_" + std::to_string(i), row);
    }
    const auto path = scratch("many.dbem");
    save_embedding_file(t, path);
    const auto back = load_embedding_file(path, ctx, width);
    REQUIRE(back.size() == N);
    std::vector<float> read;
    for (Index i = 0; i < N; ++i) {
      const auto r = back.row("sample_" + std::to_string(i));
      read.insert(read.end(), r.begin(), r.end());
    }
    CHECK(fnv1a(read) == fnv1a(all));
  }

  TEST_CASE("embedding file errors are distinct") {
    EmbeddingTable t(4, 1024);
    t.add("a", std::vector<float>(4 * 1024, 0.5f));
    const auto good = scratch("wide.dbem");
    save_embedding_file(t, good);
    CHECK(load_error_kind(good, 4, 512) == EmbeddingFileErrorKind::DimensionMismatch);
    CHECK(load_error_kind(good, 8, 0) == EmbeddingFileErrorKind::DimensionMismatch);
    CHECK_NOTHROW(load_embedding_file(good, 0, 1024));

    const auto bytes = slurp(good);
    const auto magic = scratch("magic.dbem");
    spit(magic, "DBEX" + bytes.substr(4));
    CHECK(load_error_kind(magic) == EmbeddingFileErrorKind::BadMagic);

    const auto trunc = scratch("trunc.dbem");
    spit(trunc, bytes.substr(0, bytes.size() - 7));
    CHECK(load_error_kind(trunc) == EmbeddingFileErrorKind::Truncated);
    spit(trunc, bytes.substr(0, 10));
    CHECK(load_error_kind(trunc) == EmbeddingFileErrorKind::Truncated);

    const auto trailing = scratch("trailing.dbem");
    spit(trailing, bytes + "xy");
    CHECK(load_error_kind(trailing) == EmbeddingFileErrorKind::Truncated);

    auto versioned = bytes;
    versioned[4] = 2;
    const auto ver = scratch("version.dbem");
    spit(ver, versioned);
    CHECK(load_error_kind(ver) == EmbeddingFileErrorKind::UnsupportedVersion);

    CHECK(load_error_kind(scratch("does_not_exist.dbem")) == EmbeddingFileErrorKind::Io);
  }

  TEST_CASE("embedding table rejects bad rows and keys") {
    EmbeddingTable t(2, 2);
    t.add("x", std::vector<float>(4, 1.0f));
    CHECK_THROWS(t.add("x", std::vector<float>(4, 1.0f)));
    CHECK_THROWS(t.add("y", std::vector<float>(3, 1.0f)));
    CHECK_THROWS(t.row("missing"));
  }

  TEST_CASE("label embedding lookup") {
    ParameterStore<double> store(9);
    LabelEmbedding<double> emb(ParamScope<double>(store, "label"), 10, 6);
    REQUIRE(emb.table->value().shape() == Shape{11, 6});
    CHECK(emb.null_index() == 10);

    const std::vector<Index> same{4, 4};
    const auto v = emb(same).value();
    for (Index c = 0; c < 6; ++c) CHECK(v[c] == v[6 + c]);

    std::vector<Index> all(11);
    for (Index i = 0; i <= 10; ++i) all[i] = i;
    const auto rows = emb(all).value();
    for (Index k = 0; k < 10; ++k) {
      double diff = 0;
      for (Index c = 0; c < 6; ++c) diff = std::max(diff, std::abs(rows[10 * 6 + c] - rows[k * 6 + c]));
      CHECK(diff > 0.0);
    }

    const std::vector<Index> neg{-1}, high{11};
    CHECK_THROWS_AS(emb(neg), std::out_of_range);
    CHECK_THROWS_AS(emb(high), std::out_of_range);

    // Through a bundle, real labels stop at num_classes - 1 and dropped samples get null.
    auto bundle = ConditioningBundle<double>::unconditional(3);
    bundle.labels = std::vector<Index>{2, 10, 5};
    bundle.dropped = {false, false, true};
    CHECK_THROWS_AS(emb(&bundle, 3), std::out_of_range);
    (*bundle.labels)[1] = 0;
    const auto via = emb(&bundle, 3).value();
    for (Index c = 0; c < 6; ++c) CHECK(via[12 + c] == rows[60 + c]);
  }

  TEST_CASE("dropped samples ignore their original text") {
    auto check = [](Denoiser<double>& model, Index ctx, Index width) {
      randomize_parameters(model, 21);
      const Index H = model.image_size();
      const auto x = random_tensor<double>({2, 3, H, H}, 1);
      const std::vector<double> ts{5.0, 40.0};
      auto make = [&](std::uint64_t text_seed) {
        ConditioningBundle<double> c;
        c.sequence = random_tensor<double>({2, ctx, width}, text_seed);
        c.mask = std::vector<std::uint8_t>(static_cast<std::size_t>(2 * ctx), 1);
        c.labels = std::vector<Index>{1, 2};
        c.dropped = {false, false};
        Rng rng(0);
        auto out = apply_conditioning_dropout(c, 0.0, rng, 3);
        out.dropped[1] = true;
        return out;
      };
      const auto a = make(100), b = make(200);
      NoGradGuard guard;
      const auto ya = model.forward(constant(x), ts, &a).value();
      const auto yb = model.forward(constant(x), ts, &b).value();
      const Index per = 3 * H * H;
      bool sample1_equal = true, sample0_differs = false;
      for (Index i = 0; i < per; ++i) {
        sample0_differs |= ya[i] != yb[i];
        sample1_equal &= ya[per + i] == yb[per + i];
      }
      CHECK(sample0_differs);
      CHECK(sample1_equal);
    };
    SUBCASE("iuvit") {
      auto cfg = toy_iuvit();
      cfg.cross_attention = true;
      cfg.text_width = 6;
      cfg.text_context = 3;
      cfg.num_classes = 3;
      IUViT<double> model(cfg, 1);
      check(model, 3, 6);
    }
    SUBCASE("ascend") {
      auto cfg = toy_ascend(16);
      cfg.cross_attention = true;
      cfg.text_width = 4;
      cfg.text_context = 3;
      cfg.num_classes = 3;
      ASCEND<double> model(cfg, 1);
      check(model, 3, 4);
    }
  }
}
