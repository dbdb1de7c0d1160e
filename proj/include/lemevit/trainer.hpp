#pragma once

// Synthetic 3-class pattern data and a minimal single-threaded training loop.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "lemevit/model.hpp"

namespace lemevit {

inline constexpr std::size_t kSynthClasses = 3;
inline constexpr std::size_t kSynthPeriod = 8;

/// Labels: 0 horizontal stripes, 1 vertical stripes, 2 checkerboard.
struct SynthDataset {
  Tensor<float> images;  // [n×3×side×side]
  std::vector<std::size_t> labels;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  /// Copy of sample i as [3×side×side].
  Tensor<float> image(std::size_t i) const;
};

/// Label i % 3 for sample i, random phase per sample, ±1 patterns with
/// period 8 px, then additive Gaussian noise. Throws ConfigError for n < 3.
SynthDataset make_synth(std::size_t n, double noise_sigma, std::uint64_t seed, std::size_t side = 64);

enum class OptimizerKind { SgdMomentum, AdamWLite };

std::string to_string(OptimizerKind kind);
/// "sgd-momentum" or "adamw-lite"; throws ConfigError otherwise.
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double lr = 5e-5;
  OptimizerKind optimizer = OptimizerKind::AdamWLite;
  double weight_decay = 0.01;
  double momentum = 0.9;  // sgd-momentum only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError for batch_size 0, negative lr or decay, smoothing outside [0,1).
  void validate() const;
};

struct HistoryEntry {
  std::size_t step = 0;
  double loss = 0.0;      // batch mean, before the update
  double accuracy = 0.0;  // batch accuracy, before the update
};

using TrainCallback = std::function<void(const HistoryEntry&)>;

/// Throws ConfigError if the head is not sized for the dataset's classes,
/// NumericError naming the step when the loss becomes non-finite.
std::vector<HistoryEntry> train_toy(Model<float>& model, const SynthDataset& ds,
                                    const TrainConfig& cfg, const TrainCallback& on_step = {});

/// Anything mapping a [3×H×W] image to class logits.
using ClassifierFn = std::function<Tensor<float>(const Tensor<float>&)>;

double evaluate(const ClassifierFn& classify, const SynthDataset& ds);
double evaluate(Model<float>& model, const SynthDataset& ds);

std::size_t argmax(std::span<const float> logits);

/// "step,loss,acc" rows.
std::string history_csv(const std::vector<HistoryEntry>& history);

}  // namespace lemevit
