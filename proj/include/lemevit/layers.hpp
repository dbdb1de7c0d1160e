#pragma once

// Parameter holders for the primitive layers shared by every block, with
// their forward passes. Weights use truncated-normal(0.02) init, biases
// zero, LayerNorm gamma one.

#include <functional>
#include <random>
#include <string>

#include "lemevit/autodiff.hpp"

namespace lemevit {

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <typename T>
Tensor<T> make_weight(Shape shape, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  fill_trunc_normal(t, rng, kInitStd);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> make_filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// y = x·W + b with W stored [in×out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight(make_weight<T>({in, out}, rng)), bias(make_filled<T>({out}, T{0})) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return linear(x, g.param(weight), g.param(bias));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t dim)
      : gamma(make_filled<T>({dim}, T{1})), beta(make_filled<T>({dim}, T{0})) {}

  bool defined() const { return gamma.defined(); }

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return layer_norm(x, g.param(gamma), g.param(beta), static_cast<T>(kLayerNormEps));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [Cout × Cin/groups × k × k]
  Tensor<T> bias;    // [Cout]
  kernels::Conv2dGeometry geom;

  Conv2dParams() = default;
  Conv2dParams(std::size_t cin, std::size_t cout, std::size_t kernel,
               kernels::Conv2dGeometry geometry, std::mt19937_64& rng)
      : weight(make_weight<T>({cout, cin / geometry.groups, kernel, kernel}, rng)),
        bias(make_filled<T>({cout}, T{0})),
        geom(geometry) {}

  bool defined() const { return weight.defined(); }
  std::size_t in_channels() const { return weight.dim(1) * geom.groups; }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  /// x is [C×H×W].
  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return conv2d(x, g.param(weight), g.param(bias), geom);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

/// Two-layer GELU MLP D → E·D → D.
template <typename T>
struct FfnParams {
  Linear<T> fc1;
  Linear<T> fc2;

  FfnParams() = default;
  FfnParams(std::size_t dim, std::size_t expansion, std::mt19937_64& rng)
      : fc1(dim, dim * expansion, rng), fc2(dim * expansion, dim, rng) {}

  Var<T> operator()(const Var<T>& x) { return fc2(gelu(fc1(x))); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

}  // namespace lemevit
