#pragma once

// Forward and backward numeric kernels. Every function here is a pure
// function of its arguments; autodiff.hpp wraps them into graph ops.

#include <cstddef>
#include <span>
#include <vector>

#include "lemevit/tensor.hpp"

namespace lemevit::kernels {

// c[P×R] (+)= a[P×Q] · b[Q×R]
template <typename T>
void gemm_nn(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate);
// c[P×R] (+)= a[Q×P]ᵀ · b[Q×R]
template <typename T>
void gemm_tn(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate);
// c[P×R] (+)= a[P×Q] · b[R×Q]ᵀ
template <typename T>
void gemm_nt(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate);

/// [P×Q]·[Q×R], [B×P×Q]·[Q×R] (b broadcast over the batch) or [B×P×Q]·[B×Q×R].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Row softmax over the last axis, with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Normalizes over the last axis. Optionally returns per-row mean and 1/σ.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     std::vector<T>* mean = nullptr, std::vector<T>* rstd = nullptr);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_derivative(T x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// floor((in + 2·padding − k) / stride) + 1; throws when k exceeds the padded input.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

/// Cross-correlation of x[Cin×H×W] with w[Cout×(Cin/groups)×k×k]; `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dGeometry& geom);

/// Accumulates into whichever of dx/dw/db are non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Conv2dGeometry& geom,
                     const Tensor<T>& dy, std::span<T> dx, std::span<T> dw, std::span<T> db);

/// Column means of x[N×D].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Multi-head softmax(q·kᵀ/scale)·v with heads split along the width axis.
///
/// q is [N1×C], k and v are [N2×C]. When `probs` is non-null it receives the
/// per-head attention matrices as [heads×N1×N2].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, T scale, Tensor<T>* probs = nullptr);

/// Gradients of attention() given the retained probabilities; accumulates into dq/dk/dv.
template <typename T>
void attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        std::size_t heads, T scale, const Tensor<T>& probs, const Tensor<T>& dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv);

}  // namespace lemevit::kernels
