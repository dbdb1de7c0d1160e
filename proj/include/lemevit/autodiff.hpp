#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Graph is a tape: every op executed through it while recording is
// appended in execution order, and backward() walks the tape once in
// reverse. Parameters live outside the graph as Tensor objects; binding one
// with Graph::param() makes backward() accumulate into Tensor::grad().
//
// A Graph must be driven by one thread at a time.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "lemevit/kernels.hpp"
#include "lemevit/tensor.hpp"

namespace lemevit {

template <typename T>
class Graph;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T>* bound = nullptr;  // external parameter, when this node is a bound leaf
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = false;
  std::function<void(const Node&)> backward;

  const Tensor<T>& val() const { return bound ? *bound : value; }
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(val().numel(), T{0});
    return grad;
  }
};

/// Handle to a value computed in a Graph. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->val(); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rank() const { return value().rank(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Gradient accumulated by the last backward pass; empty when none.
  std::span<const T> grad() const { return node_->grad; }
  Graph<T>& graph() const { return *graph_; }
  Node<T>& node() const { return *node_; }

 private:
  friend class Graph<T>;
  Var(Graph<T>* graph, std::shared_ptr<Node<T>> node) : graph_(graph), node_(std::move(node)) {}

  Graph<T>* graph_ = nullptr;
  std::shared_ptr<Node<T>> node_;
};

enum class GradMode { Enabled, Disabled };

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(const Node<T>&)>;

  explicit Graph(GradMode mode = GradMode::Enabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return mode_ == GradMode::Enabled; }

  Var<T> constant(Tensor<T> value) { return make_leaf(std::move(value), nullptr, false); }

  /// Owned leaf; its gradient is read back through Var::grad().
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return make_leaf(std::move(value), nullptr, requires_grad);
  }

  /// Leaf that aliases an external tensor. backward() adds into tensor.grad()
  /// when tensor.requires_grad() is set. The tensor must outlive the graph.
  Var<T> param(Tensor<T>& tensor) { return make_leaf(Tensor<T>{}, &tensor, tensor.requires_grad()); }

  /// Appends an op result. `fn` receives the output node (value and grad)
  /// and must accumulate into its inputs' gradients.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) {
      if (!in.defined()) continue;
      if (in.graph_ != this) throw ContractError("op inputs belong to a different graph");
      needs = needs || in.requires_grad();
    }
    if (recording() && needs) {
      node->requires_grad = true;
      node->backward = std::move(fn);
      tape_.push_back(node);
    }
    return Var<T>(this, std::move(node));
  }

  /// Populates gradients of every requires-grad leaf with ∂loss/∂leaf.
  void backward(const Var<T>& loss) {
    if (!recording()) throw ContractError("backward on a graph built without gradient recording");
    if (backward_done_) throw ContractError("backward already ran on this graph");
    if (!loss.defined() || loss.graph_ != this) throw ContractError("loss is not part of this graph");
    if (loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any requires-grad leaf");
    backward_done_ = true;
    loss.node_->grad_buffer()[0] = T{1};
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.is_leaf) {
        auto g = node.grad_buffer();
        if (node.bound) {
          auto dst = node.bound->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        continue;
      }
      if (node.grad.empty() || !node.backward) continue;
      node.backward(node);
      ++ops_visited_;
    }
  }

  /// Number of recorded (non-leaf) ops.
  std::size_t num_ops() const {
    std::size_t n = 0;
    for (const auto& node : tape_) n += node->is_leaf ? 0 : 1;
    return n;
  }
  std::size_t ops_visited() const noexcept { return ops_visited_; }

  /// Multiply-accumulates executed by instrumented ops (matmul, linear, conv2d, attention).
  std::uint64_t macs() const noexcept { return macs_; }
  void add_macs(std::uint64_t n) noexcept { macs_ += n; }
  void reset_macs() noexcept { macs_ = 0; }

 private:
  Var<T> make_leaf(Tensor<T> value, Tensor<T>* bound, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->bound = bound;
    node->is_leaf = true;
    node->requires_grad = requires_grad && recording();
    if (node->requires_grad) tape_.push_back(node);
    return Var<T>(this, std::move(node));
  }

  GradMode mode_;
  std::vector<std::shared_ptr<Node<T>>> tape_;
  std::uint64_t macs_ = 0;
  std::size_t ops_visited_ = 0;
  bool backward_done_ = false;
};

/// Gradient slot of `v` for accumulation, or an empty span if it needs none.
template <typename T>
std::span<T> grad_slot(const Var<T>& v) {
  if (!v.defined() || !v.requires_grad()) return {};
  return v.node().grad_buffer();
}

// ---- differentiable ops ---------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[N×in]·w[in×out] + bias[out]; `bias` may be undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> transpose(const Var<T>& a);
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T>
Var<T> softmax_rows(const Var<T>& x);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const kernels::Conv2dGeometry& geom);
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
/// Fused multi-head attention. `probs_out`, when given, receives [heads×N1×N2].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, T scale,
                 Tensor<T>* probs_out = nullptr);
/// Mean cross-entropy of logits[C] against `label`, with optional label smoothing.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t label, T smoothing = T{0});

}  // namespace lemevit
