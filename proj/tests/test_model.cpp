#include <algorithm>
#include <map>
#include <random>

#include "doctest.h"
#include "lemevit/complexity.hpp"

using namespace lemevit;

namespace {

Tensor<float> image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_uniform<float>({3, h, w}, rng);
}

/// Parameter total per report entry, attributing each tensor to the entry
/// whose name is its longest dotted prefix.
std::map<std::string, std::uint64_t> params_by_entry(Model<float>& model, const ComplexityReport& report) {
  std::map<std::string, std::uint64_t> out;
  model.visit([&](const std::string& name, Tensor<float>& t) {
    std::string best;
    for (const auto& e : report.entries) {
      if ((name == e.name || name.starts_with(e.name + ".")) && e.name.size() > best.size()) best = e.name;
    }
    out[best] += t.numel();
  });
  return out;
}

}  // namespace

TEST_CASE("variant registry rows") {
  const VariantSpec tiny = variant("tiny");
  CHECK(tiny.blocks == std::array<std::size_t, 5>{1, 2, 2, 8, 2});
  CHECK(tiny.dims == std::array<std::size_t, 4>{64, 128, 192, 320});
  const VariantSpec small = variant("small");
  CHECK(small.blocks == std::array<std::size_t, 5>{1, 2, 2, 6, 2});
  CHECK(small.dims == std::array<std::size_t, 4>{96, 192, 320, 384});
  const VariantSpec base = variant("base");
  CHECK(base.blocks == std::array<std::size_t, 5>{2, 4, 4, 18, 4});
  CHECK(base.dims == std::array<std::size_t, 4>{96, 192, 384, 512});
  for (const auto& name : variant_names()) {
    const VariantSpec s = variant(name);
    CHECK(s.meta_len == 16);
    CHECK(s.expansion == 4);
    CHECK(s.head_dim == 32);
    CHECK_NOTHROW(s.validate());
  }
  CHECK_THROWS_AS(variant("huge"), ConfigError);
}

TEST_CASE("spec validation") {
  VariantSpec s = variant("tiny");
  s.dims[1] = 100;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = variant("tiny");
  s.meta_len = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = variant("tiny");
  s.num_classes = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = variant("tiny");
  s.blocks = {0, 0, 0, 0, 0};
  CHECK_NOTHROW(s.validate());
  CHECK_THROWS_AS(Model<float>::build(VariantSpec{}, 0), ConfigError);
}

TEST_CASE("tiny forward at 224 gives stage token counts and logits") {
  Model<float> model = Model<float>::build(variant("tiny"), 0);
  Graph<float> g(GradMode::Disabled);
  const auto r = model.forward(g.constant(image(224, 224, 1)));
  CHECK(r.logits.shape() == Shape{1000});
  const std::array<std::size_t, 4> counts{3136, 784, 196, 49}, dims{64, 128, 192, 320};
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(r.features[s].count() == counts[s]);
    CHECK(r.features[s].channels() == dims[s]);
    CHECK(r.meta[s].shape() == Shape{16, dims[s]});
  }
  CHECK(r.features[0].height == 56);
  CHECK(r.features[3].width == 7);
}

TEST_CASE("forward is deterministic in seed and input") {
  const Tensor<float> x = image(64, 64, 2);
  Model<float> a = Model<float>::build(variant("tiny"), 7), b = Model<float>::build(variant("tiny"), 7);
  CHECK(identical(forward_classify(a, x), forward_classify(b, x)));
  CHECK(identical(forward_classify(a, x), forward_classify(a, x)));
  Model<float> c = Model<float>::build(variant("tiny"), 8);
  CHECK_FALSE(identical(forward_classify(a, x), forward_classify(c, x)));
}

TEST_CASE("input extents must be multiples of 32") {
  Model<float> m = Model<float>::build(variant("tiny-narrow"), 0);
  CHECK_THROWS_AS(forward_classify(m, Tensor<float>({3, 48, 64})), InputError);
  CHECK_THROWS_AS(forward_classify(m, Tensor<float>({1, 64, 64})), InputError);
  CHECK_THROWS_AS(check_input_extent(0, 32), InputError);
  CHECK_NOTHROW(check_input_extent(32, 96));
}

TEST_CASE("feature grids") {
  Model<float> model = Model<float>::build(variant("tiny"), 0);
  const Tensor<float> x = image(64, 64, 3);
  const auto f = forward_features(model, x);
  const std::array<std::size_t, 4> sides{16, 8, 4, 2};
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(f[s].height == sides[s]);
    CHECK(f[s].width == sides[s]);
  }
  Graph<float> g(GradMode::Disabled);
  const auto r = model.forward(g.constant(x));
  for (std::size_t s = 0; s < 4; ++s) CHECK(identical(f[s].tokens, r.features[s].tokens.value()));
  CHECK(identical(r.logits.value(), forward_classify(model, x)));

  const auto big = forward_features(model, image(224, 224, 4));
  CHECK(big[1].tokens.shape() == Shape{784, 128});
  CHECK(big[2].tokens.shape() == Shape{196, 192});
}

TEST_CASE("parameter count matches the complexity report for every variant and toggle") {
  for (const auto& name : variant_names()) {
    for (int toggles = 0; toggles < 8; ++toggles) {
      VariantSpec s = variant(name);
      s.use_ca_stage = toggles & 1;
      s.use_meta_stem = toggles & 2;
      s.use_meta_pooling = toggles & 4;
      if (name == "base" && toggles != 7) continue;  // one base build is enough
      Model<float> m = Model<float>::build(s, 0);
      const ComplexityReport report = count_model(s, 224, 224);
      CAPTURE(name);
      CAPTURE(toggles);
      CHECK(m.num_params() == report.totals.params);
      const auto per_entry = params_by_entry(m, report);
      CHECK(per_entry.count("") == 0);
      for (const auto& e : report.entries) {
        CAPTURE(e.name);
        CHECK(per_entry.count(e.name) == (e.params > 0 ? 1 : 0));
        if (e.params > 0) CHECK(per_entry.at(e.name) == e.params);
      }
    }
  }
}

TEST_CASE("toggling components changes the count by their analytic size") {
  const VariantSpec full = variant("small");
  VariantSpec no_ca = full, no_stem = full;
  no_ca.use_ca_stage = false;
  no_stem.use_meta_stem = false;
  auto params = [](const VariantSpec& s) { return Model<float>::build(s, 0).num_params(); };

  BlockConfig ca{BlockKind::CrossAttention, 96, 32, 4};
  CHECK(params(full) - params(no_ca) == block_params(ca));

  // meta stem D0→D1→D1 with biases; without it the initial tokens are M×D1
  const std::size_t d0 = 64, d1 = 96, m = 16;
  const std::size_t stem = d0 * d1 + d1 + d1 * d1 + d1;
  CHECK(params(full) - params(no_stem) == stem + m * d0 - m * d1);
}

TEST_CASE("parameter count does not depend on input resolution") {
  VariantSpec s = variant("tiny");
  CHECK(count_model(s, 224, 224).totals.params == count_model(s, 64, 96).totals.params);
  Model<float> m = Model<float>::build(s, 0);
  const std::size_t before = m.num_params();
  forward_classify(m, image(64, 64, 5));
  forward_classify(m, image(96, 128, 5));
  CHECK(m.num_params() == before);
}

TEST_CASE("gradient reaches the initial meta tokens") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Model<float> m = Model<float>::build(variant("tiny-narrow"), seed);
    Graph<float> g;
    const auto r = m.forward(g.constant(image(64, 64, 10 + seed)));
    g.backward(cross_entropy(r.logits, 1));
    REQUIRE(m.meta_tokens().has_grad());
    double norm = 0;
    for (float v : m.meta_tokens().grad()) norm += double(v) * v;
    CHECK(norm > 0);
  }
}

TEST_CASE("meta pooling toggle is wired into the head") {
  VariantSpec with = variant("tiny-narrow"), without = with;
  without.use_meta_pooling = false;
  Model<float> a = Model<float>::build(with, 3), b = Model<float>::build(without, 3);
  const Tensor<float> x = image(64, 64, 6);
  CHECK(max_abs_diff(forward_classify(a, x), forward_classify(b, x)) > 1e-6);
}

TEST_CASE("meta token length is constant across stages for any M") {
  VariantSpec s = variant("tiny-narrow");
  for (std::size_t m : {2, 5, 16}) {
    s.meta_len = m;
    Model<float> model = Model<float>::build(s, 0);
    Graph<float> g(GradMode::Disabled);
    const auto r = model.forward(g.constant(image(64, 64, 7)));
    for (const auto& meta : r.meta) CHECK(meta.dim(0) == m);
  }
}

TEST_CASE("attention maps of the last stage-2 DCA block") {
  Model<float> model = Model<float>::build(variant("tiny"), 0);
  const auto maps = export_attention_maps(model, image(128, 96, 8));
  REQUIRE(maps.size() == 16);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    CHECK(maps[i].meta_index == i);
    CHECK(maps[i].map.shape() == Shape{16, 12});
    double total = 0;
    for (float v : maps[i].map.data()) total += v;
    CHECK(std::abs(total - 1.0) <= 1e-5);
  }

  const auto flat = export_attention_maps(model, Tensor<float>({3, 64, 64}, 0.3f));
  for (const auto& m : flat) {
    const auto [lo, hi] = std::minmax_element(m.map.data().begin(), m.map.data().end());
    CHECK(*hi / *lo < 1.5f);
  }

  Graph<float> g(GradMode::Disabled);
  const auto r = model.forward(g.constant(image(64, 64, 9)));
  CHECK_FALSE(r.attention_retained);
  CHECK_THROWS_AS(export_attention_maps(r), ContractError);

  VariantSpec no_dca = variant("tiny-narrow");
  no_dca.blocks[2] = 0;
  Model<float> bare = Model<float>::build(no_dca, 0);
  CHECK_THROWS_AS(export_attention_maps(bare, image(64, 64, 9)), ContractError);
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Model<float> m = Model<float>::build(variant("tiny-narrow"), 0);
  Graph<float> g;
  g.backward(cross_entropy(m.forward(g.constant(image(64, 64, 11))).logits, 0));
  bool any = false;
  m.visit([&](const std::string&, Tensor<float>& t) { any = any || t.has_grad(); });
  CHECK(any);
  m.zero_grad();
  std::size_t nonzero = 0;
  m.visit([&](const std::string&, Tensor<float>& t) {
    nonzero += std::count_if(t.grad().begin(), t.grad().end(), [](float v) { return v != 0.0f; });
  });
  CHECK(nonzero == 0);
}
