#include "lemevit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace lemevit {

Tensor<float> SynthDataset::image(std::size_t i) const {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t len = c * h * w;
  const auto src = images.data().subspan(i * len, len);
  return Tensor<float>({c, h, w}, std::vector<float>(src.begin(), src.end()));
}

SynthDataset make_synth(std::size_t n, double noise_sigma, std::uint64_t seed, std::size_t side) {
  if (n < kSynthClasses) throw ConfigError("synthetic dataset needs at least 3 samples");
  if (side == 0) throw ConfigError("synthetic image side must be positive");
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  SynthDataset ds;
  ds.noise_sigma = noise_sigma;
  ds.seed = seed;
  ds.images = Tensor<float>({n, 3, side, side});
  ds.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> phase(0, kSynthPeriod - 1);
  std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  const std::size_t half = kSynthPeriod / 2;
  auto data = ds.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % kSynthClasses;
    ds.labels[i] = label;
    const std::size_t py = phase(rng), px = phase(rng);
    float* img = data.data() + i * 3 * side * side;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const bool row_on = ((y + py) / half) % 2 == 0;
        const bool col_on = ((x + px) / half) % 2 == 0;
        const bool on = label == 0 ? row_on : label == 1 ? col_on : row_on != col_on;
        const float base = on ? 1.0f : -1.0f;
        for (std::size_t c = 0; c < 3; ++c) {
          const double jitter = noise_sigma > 0.0 ? noise(rng) : 0.0;
          img[(c * side + y) * side + x] = static_cast<float>(base + jitter);
        }
      }
    }
  }
  return ds;
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::SgdMomentum ? "sgd-momentum" : "adamw-lite";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd-momentum") return OptimizerKind::SgdMomentum;
  if (name == "adamw-lite") return OptimizerKind::AdamWLite;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected sgd-momentum or adamw-lite)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("label smoothing must lie in [0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
}

namespace {

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(Model<float>& model) {
    ++t_;
    std::size_t slot = 0;
    model.visit([&](const std::string&, Tensor<float>& p) {
      if (state_.size() <= slot) state_.push_back({std::vector<float>(p.numel()), std::vector<float>(p.numel())});
      auto& [m, v] = state_[slot++];
      if (!p.has_grad()) return;
      auto w = p.data();
      auto g = p.grad();
      const float lr = static_cast<float>(cfg_.lr);
      const float decay = static_cast<float>(cfg_.lr * cfg_.weight_decay);
      if (cfg_.optimizer == OptimizerKind::SgdMomentum) {
        const float mu = static_cast<float>(cfg_.momentum);
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = mu * m[i] + g[i];
          w[i] -= lr * m[i] + decay * w[i];
        }
      } else {
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(b1, static_cast<double>(t_))));
        const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(b2, static_cast<double>(t_))));
        const float eps = static_cast<float>(cfg_.eps);
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = static_cast<float>(b1) * m[i] + static_cast<float>(1.0 - b1) * g[i];
          v[i] = static_cast<float>(b2) * v[i] + static_cast<float>(1.0 - b2) * g[i] * g[i];
          const float mhat = m[i] * c1, vhat = v[i] * c2;
          w[i] -= lr * mhat / (std::sqrt(vhat) + eps) + decay * w[i];
        }
      }
    });
  }

 private:
  const TrainConfig& cfg_;
  std::size_t t_ = 0;
  std::vector<std::pair<std::vector<float>, std::vector<float>>> state_;
};

}  // namespace

std::vector<HistoryEntry> train_toy(Model<float>& model, const SynthDataset& ds,
                                    const TrainConfig& cfg, const TrainCallback& on_step) {
  cfg.validate();
  if (model.spec().num_classes != kSynthClasses) {
    throw ConfigError("model head has " + std::to_string(model.spec().num_classes) +
                      " classes, the synthetic task has " + std::to_string(kSynthClasses));
  }
  std::vector<HistoryEntry> history;
  if (cfg.steps == 0) return history;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  Optimizer opt(cfg);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    model.zero_grad();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      Graph<float> g;
      Var<float> logits = model.forward(g.constant(ds.image(idx))).logits;
      Var<float> loss =
          cross_entropy(logits, ds.labels[idx], static_cast<float>(cfg.label_smoothing));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss " + std::to_string(value) + " at step " +
                           std::to_string(step) + " (sample " + std::to_string(idx) + ")");
      }
      loss_sum += value;
      correct += argmax(logits.value().data()) == ds.labels[idx] ? 1 : 0;
      g.backward(scale(loss, inv_batch));
    }
    HistoryEntry entry{step, loss_sum / static_cast<double>(cfg.batch_size),
                       static_cast<double>(correct) / static_cast<double>(cfg.batch_size)};
    opt.step(model);
    history.push_back(entry);
    if (on_step) on_step(entry);
  }
  model.zero_grad();
  return history;
}

std::size_t argmax(std::span<const float> logits) {
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double evaluate(const ClassifierFn& classify, const SynthDataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<float> logits = classify(ds.image(i));
    correct += argmax(logits.data()) == ds.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double evaluate(Model<float>& model, const SynthDataset& ds) {
  return evaluate([&](const Tensor<float>& x) { return forward_classify(model, x); }, ds);
}

std::string history_csv(const std::vector<HistoryEntry>& history) {
  std::ostringstream os;
  os << "step,loss,acc\n";
  os.precision(9);
  for (const auto& h : history) os << h.step << ',' << h.loss << ',' << h.accuracy << '\n';
  return os.str();
}

}  // namespace lemevit
