#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "lemevit/trainer.hpp"

using namespace lemevit;

namespace {

std::vector<Tensor<float>> snapshot(Model<float>& m) {
  std::vector<Tensor<float>> out;
  m.visit([&](const std::string&, Tensor<float>& t) { out.push_back(t); });
  return out;
}

bool same_params(Model<float>& m, const std::vector<Tensor<float>>& before) {
  std::size_t i = 0;
  bool same = true;
  m.visit([&](const std::string&, Tensor<float>& t) { same = same && identical(t, before[i++]); });
  return same;
}

Model<float> narrow(std::uint64_t seed) { return Model<float>::build(variant("tiny-narrow"), seed); }

struct Scores {
  double accuracy = 0, loss = 0;
};

/// Argmax accuracy and mean cross-entropy by direct log-sum-exp, one pass.
Scores score(Model<float>& m, const SynthDataset& ds) {
  Scores s;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<float> z = forward_classify(m, ds.image(i));
    double mx = -INFINITY, sum = 0;
    std::size_t best = 0;
    for (std::size_t k = 0; k < z.numel(); ++k) {
      if (z[k] > z[best]) best = k;
      mx = std::max(mx, double(z[k]));
    }
    for (float v : z.data()) sum += std::exp(double(v) - mx);
    s.loss += mx + std::log(sum) - z[ds.labels[i]];
    s.accuracy += best == ds.labels[i];
  }
  s.accuracy /= double(ds.size());
  s.loss /= double(ds.size());
  return s;
}

}  // namespace

TEST_CASE("noiseless patterns are exactly plus or minus one") {
  const SynthDataset ds = make_synth(6, 0.0, 1);
  for (float v : ds.images.data()) CHECK((v == 1.0f || v == -1.0f));
  for (std::size_t i = 0; i < 6; ++i) {
    const Tensor<float> img = ds.image(i);
    bool rows_const = true, cols_const = true, half_flip = true;
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        rows_const = rows_const && img.at(0, y, x) == img.at(0, y, 0);
        cols_const = cols_const && img.at(0, y, x) == img.at(0, 0, x);
        if (ds.labels[i] == 0 && y + 4 < 64) half_flip = half_flip && img.at(0, y, x) == -img.at(0, y + 4, x);
        if (ds.labels[i] == 1 && x + 4 < 64) half_flip = half_flip && img.at(0, y, x) == -img.at(0, y, x + 4);
        CHECK(img.at(1, y, x) == img.at(0, y, x));
      }
    CAPTURE(i);
    CHECK(rows_const == (ds.labels[i] == 0));
    CHECK(cols_const == (ds.labels[i] == 1));
    CHECK(half_flip);
  }
}

TEST_CASE("synthetic data is deterministic, balanced and noisy when asked") {
  const SynthDataset a = make_synth(30, 0.1, 9), b = make_synth(30, 0.1, 9), c = make_synth(30, 0.1, 10);
  CHECK(identical(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK_FALSE(identical(a.images, c.images));

  const SynthDataset big = make_synth(300, 0.1, 0);
  std::array<std::size_t, 3> counts{};
  for (auto l : big.labels) ++counts[l];
  CHECK(counts == std::array<std::size_t, 3>{100, 100, 100});
  const SynthDataset odd = make_synth(10, 0.0, 0);
  counts = {};
  for (auto l : odd.labels) ++counts[l];
  CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);

  // residual around the ±1 pattern has the requested spread
  double sq = 0;
  for (float v : big.images.data()) sq += (std::abs(v) - 1) * (std::abs(v) - 1);
  CHECK(std::sqrt(sq / double(big.images.numel())) == doctest::Approx(0.1).epsilon(0.02));

  CHECK_THROWS_AS(make_synth(2, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(make_synth(3, -1.0, 0), ConfigError);
}

TEST_CASE("config parsing and validation") {
  CHECK(parse_optimizer("adamw-lite") == OptimizerKind::AdamWLite);
  CHECK(parse_optimizer("sgd-momentum") == OptimizerKind::SgdMomentum);
  CHECK(to_string(OptimizerKind::SgdMomentum) == "sgd-momentum");
  CHECK_THROWS_AS(parse_optimizer("adam"), ConfigError);
  CHECK_NOTHROW(TrainConfig{}.validate());
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.label_smoothing = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero steps leave the model untouched") {
  Model<float> m = narrow(0);
  const auto before = snapshot(m);
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK(train_toy(m, make_synth(3, 0.1, 0), cfg).empty());
  CHECK(same_params(m, before));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  for (OptimizerKind opt : {OptimizerKind::AdamWLite, OptimizerKind::SgdMomentum}) {
    Model<float> m = narrow(0);
    const auto before = snapshot(m);
    TrainConfig cfg;
    cfg.steps = 2;
    cfg.batch_size = 2;
    cfg.lr = 0;
    cfg.optimizer = opt;
    CHECK(train_toy(m, make_synth(6, 0.1, 0), cfg).size() == 2);
    CHECK(same_params(m, before));
  }
}

TEST_CASE("one optimizer step follows the update rule") {
  const SynthDataset ds = make_synth(3, 0.1, 4);
  Model<float> ref = narrow(1);
  for (std::size_t i = 0; i < 3; ++i) {
    Graph<float> g;
    g.backward(scale(cross_entropy(ref.forward(g.constant(ds.image(i))).logits, ds.labels[i]), 1.0f / 3));
  }
  std::vector<Tensor<float>> grads;
  ref.visit([&](const std::string&, Tensor<float>& t) {
    Tensor<float> gt(t.shape());
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), gt.data().begin());
    grads.push_back(gt);
  });
  const auto w0 = snapshot(ref);

  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 3;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.1;

  SUBCASE("sgd-momentum: w − lr·g − lr·λ·w") {
    cfg.optimizer = OptimizerKind::SgdMomentum;
    Model<float> m = narrow(1);
    train_toy(m, ds, cfg);
    const auto w1 = snapshot(m);
    std::size_t bad = 0;
    for (std::size_t t = 0; t < w0.size(); ++t)
      for (std::size_t i = 0; i < w0[t].numel(); ++i) {
        const double want = w0[t][i] - 1e-3 * grads[t][i] - 1e-4 * w0[t][i];
        // float rounding of w plus summation-order noise in g
        const double tol = 4 * std::numeric_limits<float>::epsilon() * std::max(std::abs(want), 1e-3) +
                           1e-3 * 1e-5 * std::abs(grads[t][i]);
        bad += std::abs(w1[t][i] - want) > tol;
      }
    CHECK(bad == 0);
  }
  SUBCASE("adamw-lite: first step moves by lr·sign(g) plus decay") {
    Model<float> m = narrow(1);
    train_toy(m, ds, cfg);
    const auto w1 = snapshot(m);
    std::size_t checked = 0, bad = 0;
    for (std::size_t t = 0; t < w0.size(); ++t)
      for (std::size_t i = 0; i < w0[t].numel(); ++i) {
        if (std::abs(grads[t][i]) < 1e-4) continue;  // eps and summation order matter below this
        const double sign = grads[t][i] > 0 ? 1.0 : -1.0;
        const double want = w0[t][i] - 1e-3 * sign - 1e-4 * w0[t][i];
        bad += std::abs(w1[t][i] - want) > 1e-6;
        ++checked;
      }
    CHECK(checked > 1000);
    CHECK(bad == 0);
  }
}

TEST_CASE("a non-finite loss aborts naming the step") {
  Model<float> m = narrow(0);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 1;
  cfg.lr = 1e30;
  cfg.optimizer = OptimizerKind::SgdMomentum;
  try {
    train_toy(m, make_synth(3, 0.1, 0), cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("at step 1") != std::string::npos);
  }

  Model<float> poisoned = narrow(0);
  poisoned.visit([](const std::string& name, Tensor<float>& t) {
    if (name == "head.fc.bias") t[0] = std::numeric_limits<float>::quiet_NaN();
  });
  cfg.lr = 1e-3;
  CHECK_THROWS_WITH_AS(train_toy(poisoned, make_synth(3, 0.1, 0), cfg), doctest::Contains("at step 0"),
                       NumericError);
}

TEST_CASE("head must match the three synthetic classes") {
  Model<float> m = Model<float>::build(variant("tiny"), 0);
  TrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(train_toy(m, make_synth(3, 0.1, 0), cfg), ConfigError);
}

TEST_CASE("evaluation") {
  const SynthDataset ds = make_synth(30, 0.1, 2);
  CHECK(evaluate([&](const Tensor<float>&) { return Tensor<float>::from({3}, {0, 1, 0}); }, ds) ==
        doctest::Approx(10.0 / 30));

  // a stub that recognizes the pattern directly is perfect
  auto oracle_classifier = [](const Tensor<float>& img) {
    double row_var = 0, col_var = 0;
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x + 1 < 64; ++x) {
        row_var += std::abs(img.at(0, y, x + 1) - img.at(0, y, x));
        col_var += std::abs(img.at(0, x + 1, y) - img.at(0, x, y));
      }
    Tensor<float> z({3});
    const std::size_t k = row_var < 0.5 * col_var ? 0 : col_var < 0.5 * row_var ? 1 : 2;
    z[k] = 1;
    return z;
  };
  CHECK(evaluate(oracle_classifier, make_synth(30, 0.0, 3)) == 1.0);

  Model<float> m = narrow(0);
  const auto before = snapshot(m);
  const double acc = evaluate(m, ds);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(same_params(m, before));
  m.visit([](const std::string&, Tensor<float>& t) { CHECK_FALSE(t.has_grad()); });
}

TEST_CASE("untrained models sit near chance") {
  const SynthDataset ds = make_synth(300, 0.1, 77);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model<float> m = narrow(seed);
    const Scores s = score(m, ds);
    CAPTURE(seed);
    CHECK(s.accuracy >= 0.15);
    CHECK(s.accuracy <= 0.55);
    if (seed == 0) CHECK(s.accuracy == doctest::Approx(evaluate(m, ds)));
    CHECK(std::abs(s.loss - std::log(3.0)) <= 0.2);
  }
}

TEST_CASE("short runs record history and train without the CA stage") {
  VariantSpec s = variant("tiny-narrow");
  s.use_ca_stage = false;
  Model<float> m = Model<float>::build(s, 0);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 2;
  std::size_t calls = 0;
  const auto h = train_toy(m, make_synth(9, 0.1, 0), cfg, [&](const HistoryEntry& e) { CHECK(e.step == calls++); });
  CHECK(calls == 4);
  REQUIRE(h.size() == 4);
  for (const auto& e : h) {
    CHECK(std::isfinite(e.loss));
    CHECK(e.accuracy >= 0.0);
  }
  const std::string csv = history_csv(h);
  CHECK(csv.starts_with("step,loss,acc\n0,"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto run = [] {
    Model<float> m = narrow(0);
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch_size = 2;
    cfg.seed = 5;
    const auto h = train_toy(m, make_synth(9, 0.1, 0), cfg);
    return std::make_pair(h.back().loss, snapshot(m));
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  for (std::size_t i = 0; i < a.second.size(); ++i) CHECK(identical(a.second[i], b.second[i]));
}
