#include "lemevit/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace lemevit {

void AttentionConfig::validate() const {
  if (head_dim == 0 || dim == 0 || dim % head_dim != 0) {
    throw ConfigError("attention: head_dim " + std::to_string(head_dim) +
                      " must divide dim " + std::to_string(dim));
  }
}

std::size_t AttentionConfig::num_heads() const {
  validate();
  return dim / head_dim;
}

double entropy_scale(std::size_t n_query, std::size_t n_key, std::size_t width) {
  if (n_query < 2 || n_key < 2) {
    throw std::domain_error("entropy_scale: token counts must be at least 2 (got " +
                            std::to_string(n_query) + ", " + std::to_string(n_key) + ")");
  }
  if (width == 0) throw std::domain_error("entropy_scale: width must be positive");
  return std::log(static_cast<double>(n_query)) / std::log(static_cast<double>(n_key)) *
         std::sqrt(static_cast<double>(width));
}

double attention_scale(const AttentionConfig& cfg, std::size_t n_query, std::size_t n_key) {
  if (cfg.scaling == AttentionScaling::EntropyInvariant) {
    return entropy_scale(n_query, n_key, cfg.head_dim);
  }
  return std::sqrt(static_cast<double>(cfg.head_dim));
}

template <typename T>
AttentionResult<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                                const Tensor<T>& v, T scale) {
  if (!(scale > T{0})) throw std::domain_error("scaled_dot_product_attention: scale must be > 0");
  AttentionResult<T> r;
  Tensor<T> probs;
  r.out = kernels::attention(q, k, v, 1, scale, &probs);
  r.attn = probs.reshaped({q.dim(0), k.dim(0)});
  return r;
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& q_src, const Var<T>& k_src, const Var<T>& v_src,
                            const AttentionConfig& cfg, MhaParams<T>& params,
                            Tensor<T>* head_average) {
  const std::size_t heads = cfg.num_heads();
  if (q_src.shape().back() != cfg.dim || k_src.shape().back() != cfg.dim ||
      v_src.shape().back() != cfg.dim) {
    throw ConfigError("multi_head_attention: input widths " + shape_str(q_src.shape()) + ", " +
                      shape_str(k_src.shape()) + ", " + shape_str(v_src.shape()) +
                      " do not match dim " + std::to_string(cfg.dim));
  }
  const T scale = static_cast<T>(attention_scale(cfg, q_src.dim(0), k_src.dim(0)));
  Var<T> q = params.q(q_src);
  Var<T> k = params.k(k_src);
  Var<T> v = params.v(v_src);
  Tensor<T> probs;
  Var<T> ctx = attention(q, k, v, heads, scale, head_average ? &probs : nullptr);
  if (head_average) {
    const std::size_t n1 = q_src.dim(0), n2 = k_src.dim(0);
    Tensor<T> avg({n1, n2});
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n1 * n2; ++i) avg[i] += probs[h * n1 * n2 + i];
    }
    for (auto& x : avg.data()) x /= static_cast<T>(heads);
    *head_average = std::move(avg);
  }
  return params.o(ctx);
}

template AttentionResult<float> scaled_dot_product_attention(const Tensor<float>&,
                                                             const Tensor<float>&,
                                                             const Tensor<float>&, float);
template AttentionResult<double> scaled_dot_product_attention(const Tensor<double>&,
                                                              const Tensor<double>&,
                                                              const Tensor<double>&, double);
template Var<float> multi_head_attention(const Var<float>&, const Var<float>&, const Var<float>&,
                                         const AttentionConfig&, MhaParams<float>&, Tensor<float>*);
template Var<double> multi_head_attention(const Var<double>&, const Var<double>&,
                                          const Var<double>&, const AttentionConfig&,
                                          MhaParams<double>&, Tensor<double>*);

}  // namespace lemevit
