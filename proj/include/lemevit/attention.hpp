#pragma once

#include <cstddef>
#include <random>

#include "lemevit/layers.hpp"

namespace lemevit {

enum class AttentionScaling {
  Standard,          // divide logits by √d_h
  EntropyInvariant,  // divide by (ln N_query / ln N_key)·√d_h
};

struct AttentionConfig {
  std::size_t dim = 0;
  std::size_t head_dim = 32;
  AttentionScaling scaling = AttentionScaling::Standard;

  /// Throws ConfigError unless head_dim divides dim.
  void validate() const;
  std::size_t num_heads() const;
};

/// (ln n_query / ln n_key)·√width. Throws std::domain_error when either count is below 2.
double entropy_scale(std::size_t n_query, std::size_t n_key, std::size_t width);

/// Softmax divisor for the given sequence lengths under `cfg`.
double attention_scale(const AttentionConfig& cfg, std::size_t n_query, std::size_t n_key);

template <typename T>
struct AttentionResult {
  Tensor<T> out;   // [N1×C]
  Tensor<T> attn;  // [N1×N2]
};

/// Single-head softmax(q·kᵀ/scale)·v on plain tensors.
template <typename T>
AttentionResult<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                                const Tensor<T>& v, T scale);

/// Q/K/V/output projections of one attention layer, each C×C with bias.
template <typename T>
struct MhaParams {
  Linear<T> q, k, v, o;

  MhaParams() = default;
  MhaParams(std::size_t dim, std::mt19937_64& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng) {}

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    o.visit(prefix + ".o", fn);
  }
};

/// Projects q/k/v sources, attends per head, concatenates, output-projects.
///
/// `head_average`, when non-null, receives the attention matrix averaged over
/// heads as [N1×N2].
template <typename T>
Var<T> multi_head_attention(const Var<T>& q_src, const Var<T>& k_src, const Var<T>& v_src,
                            const AttentionConfig& cfg, MhaParams<T>& params,
                            Tensor<T>* head_average = nullptr);

}  // namespace lemevit
