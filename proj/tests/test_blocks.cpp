#include <cmath>
#include <random>

#include "block_properties.hpp"
#include "doctest.h"
#include "lemevit/complexity.hpp"

using namespace lemevit;

namespace {

constexpr int kCases = 100;

Tensor<double> rnd(Shape shape, std::mt19937_64& rng) { return random_uniform<double>(std::move(shape), rng); }

void zero(Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

Tensor<double> gelu_oracle(Tensor<double> x) {
  for (auto& v : x.data()) v = oracle::gelu(v);
  return x;
}

/// Depthwise CPE on [N×D] tokens through the conv oracle.
Tensor<double> cpe_oracle(const Tensor<double>& tokens, std::size_t h, std::size_t w, const Conv2dParams<double>& c) {
  const std::size_t d = tokens.dim(1);
  Tensor<double> chw({d, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < d; ++ch) chw[ch * h * w + i] = tokens.at(i, ch);
  const Tensor<double> conv = oracle::conv2d(chw, c.weight, &c.bias, 1, 1, d);
  Tensor<double> out = tokens;
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < d; ++ch) out.at(i, ch) += conv[ch * h * w + i];
  return out;
}

/// Pre-norm self-attention + FFN residual pair built from oracles.
Tensor<double> self_block_oracle(const Tensor<double>& x, BlockParams<double>& p, const LayerNormParams<double>& ln1,
                                 const LayerNormParams<double>& ln2) {
  const auto& a = p.attn;
  const Tensor<double> xn = oracle::layer_norm(x, ln1.gamma, ln1.beta, kLayerNormEps);
  const Tensor<double> q = oracle::linear(xn, a.q.weight, a.q.bias);
  const Tensor<double> k = oracle::linear(xn, a.k.weight, a.k.bias);
  const Tensor<double> v = oracle::linear(xn, a.v.weight, a.v.bias);
  const std::size_t heads = p.config.dim / p.config.head_dim;
  const Tensor<double> att =
      oracle::linear(oracle::multi_head(q, k, v, heads, std::sqrt(double(p.config.head_dim))), a.o.weight, a.o.bias);
  const Tensor<double> x1 = oracle::add(x, att);
  const Tensor<double> h = gelu_oracle(
      oracle::linear(oracle::layer_norm(x1, ln2.gamma, ln2.beta, kLayerNormEps), p.ffn.fc1.weight, p.ffn.fc1.bias));
  return oracle::add(x1, oracle::linear(h, p.ffn.fc2.weight, p.ffn.fc2.bias));
}

std::uint64_t executed_macs(BlockParams<float>& p, std::size_t h, std::size_t w, std::size_t m) {
  std::mt19937_64 rng(1);
  Graph<float> g(GradMode::Disabled);
  run_block(TokenGrid<float>{g.constant(random_uniform<float>({h * w, p.config.dim}, rng)), h, w},
            g.constant(random_uniform<float>({m, p.config.dim}, rng)), p);
  return g.macs();
}

}  // namespace

TEST_CASE("CA leaves image tokens bit-identical") {
  std::mt19937_64 rng(51);
  for (int i = 0; i < kCases; ++i) CHECK(props::ca_image_untouched(rng));
}

TEST_CASE("SA streams do not see each other") {
  std::mt19937_64 rng(52);
  for (int i = 0; i < kCases; ++i) CHECK(props::sa_streams_independent(rng));
}

TEST_CASE("DCA without CPE is permutation equivariant on image and invariant on meta") {
  std::mt19937_64 rng(53);
  for (int i = 0; i < kCases; ++i) CHECK(props::dca_permutation_error(rng) <= 1e-6);
}

TEST_CASE("zeroed residual branches make every block an exact identity") {
  std::mt19937_64 rng(54);
  for (BlockKind kind : {BlockKind::CrossAttention, BlockKind::DualCrossAttention, BlockKind::StandardAttention}) {
    CAPTURE(to_string(kind));
    for (int i = 0; i < kCases; ++i) CHECK(props::zero_branches_identity(kind, rng));
  }
}

TEST_CASE("all-zero parameters are an identity") {
  std::mt19937_64 rng(55);
  for (BlockKind kind : {BlockKind::CrossAttention, BlockKind::DualCrossAttention, BlockKind::StandardAttention}) {
    props::Inputs in = props::draw(kind, rng);
    in.params.visit("", [](const std::string&, Tensor<double>& t) { zero(t); });
    const props::Run r = props::run(in.params, in.c, in.image, in.meta);
    CHECK(identical(r.image, in.image));
    CHECK(identical(r.meta, in.meta));
  }
}

TEST_CASE("CA meta update ignores image token order") {
  std::mt19937_64 rng(56);
  for (int i = 0; i < 20; ++i) {
    props::Inputs in = props::draw(BlockKind::CrossAttention, rng);
    const props::Run base = props::run(in.params, in.c, in.image, in.meta);
    const auto perm = oracle::random_permutation(in.image.dim(0), rng);
    const props::Run r = props::run(in.params, in.c, oracle::permute_rows(in.image, perm), in.meta);
    CHECK(max_abs_diff(r.meta, base.meta) <= 1e-6);
  }
}

TEST_CASE("parallel and sequential DCA differ only in the meta stream") {
  std::mt19937_64 rng(57);
  props::Inputs in = props::draw(BlockKind::DualCrossAttention, rng);
  in.params.config.dca_sequential = false;
  const props::Run par = props::run(in.params, in.c, in.image, in.meta);
  in.params.config.dca_sequential = true;
  const props::Run seq = props::run(in.params, in.c, in.image, in.meta);
  CHECK(identical(par.image, seq.image));
  CHECK(max_abs_diff(par.meta, seq.meta) > 1e-6);
}

TEST_CASE("SA image stream matches an oracle reassembly") {
  std::mt19937_64 rng(58);
  for (int i = 0; i < 20; ++i) {
    props::Inputs in = props::draw(BlockKind::StandardAttention, rng);
    const props::Run r = props::run(in.params, in.c, in.image, in.meta);
    const Tensor<double> x = cpe_oracle(in.image, in.c.height, in.c.width, in.params.cpe);
    CHECK(max_abs_diff(r.image, self_block_oracle(x, in.params, in.params.norm_image_attn, in.params.norm_image_ffn)) <
          1e-10);
    CHECK(max_abs_diff(r.meta, self_block_oracle(in.meta, in.params, in.params.norm_meta_attn,
                                                 in.params.norm_meta_ffn)) < 1e-10);
  }
}

TEST_CASE("blocks share one FFN between streams") {
  std::mt19937_64 rng(59);
  BlockParams<float> p({BlockKind::DualCrossAttention, 64, 32, 4}, rng);
  CHECK(p.ffn.fc1.out_features() == 256);
  std::size_t ffn_tensors = 0;
  p.visit("b", [&](const std::string& name, Tensor<float>&) { ffn_tensors += name.starts_with("b.ffn.") ? 1 : 0; });
  CHECK(ffn_tensors == 4);
  BlockParams<float> ca({BlockKind::CrossAttention, 64, 32, 4}, rng);
  CHECK_FALSE(ca.cpe.defined());
  CHECK_FALSE(ca.norm_image_ffn.defined());
  BlockConfig no_cpe{BlockKind::StandardAttention, 64, 32, 4};
  no_cpe.use_cpe = false;
  CHECK_FALSE(BlockParams<float>(no_cpe, rng).cpe.defined());
}

TEST_CASE("block shapes at stage-one scale") {
  std::mt19937_64 rng(60);
  BlockParams<float> p({BlockKind::DualCrossAttention, 64, 32, 4}, rng);
  Graph<float> g(GradMode::Disabled);
  const auto out = dca_block(TokenGrid<float>{g.constant(Tensor<float>({3136, 64})), 56, 56},
                             g.constant(Tensor<float>({16, 64})), p, true);
  CHECK(out.image.tokens.shape() == Shape{3136, 64});
  CHECK(out.image.height == 56);
  CHECK(out.meta.shape() == Shape{16, 64});
  CHECK(out.meta_attention.shape() == Shape{16, 3136});
}

TEST_CASE("block input errors") {
  std::mt19937_64 rng(61);
  BlockParams<double> p({BlockKind::DualCrossAttention, 8, 4, 2}, rng);
  Graph<double> g(GradMode::Disabled);
  const auto meta = g.constant(Tensor<double>({3, 8}));
  CHECK_THROWS_AS(dca_block(TokenGrid<double>{g.constant(Tensor<double>({4, 6})), 2, 2}, meta, p), ConfigError);
  CHECK_THROWS_AS(dca_block(TokenGrid<double>{g.constant(Tensor<double>({5, 8})), 2, 2}, meta, p), ContractError);
  CHECK_THROWS_AS(dca_block(TokenGrid<double>{g.constant(Tensor<double>({4, 8})), 2, 2},
                            g.constant(Tensor<double>({1, 8})), p),
                  InputError);
  BlockParams<double> sa({BlockKind::StandardAttention, 8, 4, 2}, rng);
  CHECK_THROWS_AS(sa_block(TokenGrid<double>{g.constant(Tensor<double>({4, 8})), 2, 2},
                           g.constant(Tensor<double>({3, 6})), sa),
                  ConfigError);
  CHECK_THROWS_AS((BlockConfig{BlockKind::DualCrossAttention, 48, 32, 4}.validate()), ConfigError);
  BlockConfig even{BlockKind::DualCrossAttention, 64, 32, 4};
  even.cpe_kernel = 2;
  CHECK_THROWS_AS(even.validate(), ConfigError);
}

TEST_CASE("CPE is a residual depthwise conv") {
  std::mt19937_64 rng(62);
  Conv2dParams<double> conv(6, 6, 3, {1, 1, 6}, rng);
  fill_uniform(conv.weight, rng, -1, 1);
  fill_uniform(conv.bias, rng, -1, 1);
  const Tensor<double> x = rnd({12, 6}, rng);
  Graph<double> g(GradMode::Disabled);
  const auto y = cpe(TokenGrid<double>{g.constant(x), 3, 4}, conv);
  CHECK(max_abs_diff(y.tokens.value(), cpe_oracle(x, 3, 4, conv)) < 1e-12);

  // position sensitive: permuting tokens before and after does not commute
  const auto perm = oracle::random_permutation(12, rng);
  const auto yp = cpe(TokenGrid<double>{g.constant(oracle::permute_rows(x, perm)), 3, 4}, conv);
  CHECK(max_abs_diff(yp.tokens.value(), oracle::permute_rows(y.tokens.value(), perm)) > 1e-3);

  zero(conv.weight);
  zero(conv.bias);
  CHECK(identical(cpe(TokenGrid<double>{g.constant(x), 3, 4}, conv).tokens.value(), x));

  CHECK_THROWS_AS(cpe(TokenGrid<double>{g.constant(x), 1, 12}, conv), ContractError);
  CHECK_THROWS_AS(cpe(TokenGrid<double>{g.constant(x), 3, 3}, conv), ContractError);
}

TEST_CASE("image stem") {
  std::mt19937_64 rng(63);
  ImageStemParams<float> p(3, 64, rng);
  CHECK(p.conv1.out_channels() == 32);
  Graph<float> g(GradMode::Disabled);
  const auto big = stem_image(g.constant(Tensor<float>({3, 224, 224})), p);
  CHECK(big.count() == 3136);
  CHECK(big.channels() == 64);
  CHECK(big.height == 56);
  CHECK(stem_image(g.constant(Tensor<float>({3, 64, 64})), p).count() == 256);
  CHECK(stem_image(g.constant(Tensor<float>({3, 32, 48})), p).width == 12);

  p.visit("", [](const std::string&, Tensor<float>& t) { std::fill(t.data().begin(), t.data().end(), 0.0f); });
  const auto z = stem_image(g.constant(Tensor<float>({3, 16, 16})), p);
  for (float v : z.tokens.value().data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(stem_image(g.constant(Tensor<float>({3, 30, 32})), p), InputError);
  CHECK_THROWS_AS(stem_image(g.constant(Tensor<float>({1, 32, 32})), p), InputError);
}

TEST_CASE("meta stem") {
  std::mt19937_64 rng(64);
  MetaStemParams<double> p(64, 64, rng);
  Graph<double> g(GradMode::Disabled);
  const Tensor<double> m0 = rnd({16, 64}, rng);
  CHECK(stem_meta(g.constant(m0), p).shape() == Shape{16, 64});

  for (Linear<double>* l : {&p.fc1, &p.fc2}) {
    zero(l->weight);
    zero(l->bias);
    for (std::size_t i = 0; i < 64; ++i) l->weight.at(i, i) = 1.0;
  }
  CHECK(max_abs_diff(stem_meta(g.constant(m0), p).value(), gelu_oracle(m0)) < 1e-12);

  zero(p.fc1.weight);
  zero(p.fc2.weight);
  fill_uniform(p.fc2.bias, rng, -1, 1);
  const Tensor<double> out = stem_meta(g.constant(m0), p).value();
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 64; ++j) CHECK(out.at(i, j) == p.fc2.bias[j]);

  CHECK_THROWS_AS(stem_meta(g.constant(Tensor<double>({4, 32})), p), ConfigError);
}

TEST_CASE("downsample") {
  std::mt19937_64 rng(65);
  DownsampleParams<float> p(64, 128, rng);
  Graph<float> g(GradMode::Disabled);
  const auto out = downsample(TokenGrid<float>{g.constant(Tensor<float>({3136, 64})), 56, 56}, p);
  CHECK(out.height == 28);
  CHECK(out.width == 28);
  CHECK(out.channels() == 128);
  const auto odd = downsample(TokenGrid<float>{g.constant(Tensor<float>({35, 64})), 7, 5}, p);
  CHECK(odd.height == 4);
  CHECK(odd.width == 3);
  CHECK_THROWS_AS(downsample(TokenGrid<float>{g.constant(Tensor<float>({1, 64})), 1, 1}, p), InputError);

  // averaging weights on a constant grid keep the interior constant
  DownsampleParams<double> avg(2, 3, rng);
  std::fill(avg.conv.weight.data().begin(), avg.conv.weight.data().end(), 1.0 / 18);
  zero(avg.conv.bias);
  Graph<double> gd(GradMode::Disabled);
  const auto c = downsample(TokenGrid<double>{gd.constant(Tensor<double>({64, 2}, 0.7)), 8, 8}, avg);
  CHECK(c.height == 4);
  for (std::size_t y = 1; y < 4; ++y)
    for (std::size_t x = 1; x < 4; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) CHECK(c.tokens.value().at(y * 4 + x, ch) == doctest::Approx(0.7));

  const Tensor<double> x = rnd({30, 2}, rng);
  fill_uniform(avg.conv.weight, rng, -1, 1);
  fill_uniform(avg.conv.bias, rng, -1, 1);
  const auto r = downsample(TokenGrid<double>{gd.constant(x), 5, 6}, avg);
  Tensor<double> chw({2, 5, 6});
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t ch = 0; ch < 2; ++ch) chw[ch * 30 + i] = x.at(i, ch);
  const Tensor<double> want = oracle::conv2d(chw, avg.conv.weight, &avg.conv.bias, 2, 1, 1);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) CHECK(r.tokens.value().at(i, ch) == doctest::Approx(want[ch * 9 + i]));
}

TEST_CASE("executed block MACs match the strict cost model") {
  std::mt19937_64 rng(66);
  for (BlockKind kind : {BlockKind::CrossAttention, BlockKind::DualCrossAttention, BlockKind::StandardAttention}) {
    for (bool sequential : {false, true}) {
      BlockConfig cfg{kind, 64, 32, 4};
      cfg.dca_sequential = sequential;
      BlockParams<float> p(cfg, rng);
      const std::uint64_t counted = executed_macs(p, 14, 14, 16);
      const std::uint64_t model = block_macs(cfg, 196, 16, CostConvention::Strict);
      CAPTURE(to_string(kind));
      CHECK(std::abs(double(counted) - double(model)) <= 0.05 * double(model));
    }
  }
}
