#pragma once

// Independent reference implementations used as test oracles. Plain loops,
// no shared code with the kernels under test.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "lemevit/tensor.hpp"

namespace oracle {

using lemevit::Tensor;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor<T> c({p, r});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < q; ++k) acc += double(a.at(i, k)) * double(b.at(k, j));
      c.at(i, j) = static_cast<T>(acc);
    }
  return c;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, std::size_t stride,
                 std::size_t pad, std::size_t groups) {
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t opg = cout / groups;
  (void)cin;
  Tensor<T> y({cout, ho, wo});
  for (std::size_t co = 0; co < cout; ++co) {
    const std::size_t g = co / opg;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = bias ? double((*bias)[co]) : 0.0;
        for (std::size_t ci = 0; ci < cpg; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(oy * stride + ky) - long(pad);
              const long ix = long(ox * stride + kx) - long(pad);
              if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
              acc += double(x.at(g * cpg + ci, std::size_t(iy), std::size_t(ix))) *
                     double(w[((co * cpg + ci) * k + ky) * k + kx]);
            }
        y.at(co, oy, ox) = static_cast<T>(acc);
      }
  }
  return y;
}

/// Single-head attention by explicit double loops.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, double scale,
                    Tensor<T>* probs = nullptr) {
  const std::size_t n1 = q.dim(0), n2 = k.dim(0), c = q.dim(1);
  Tensor<T> out({n1, c});
  if (probs) *probs = Tensor<T>({n1, n2});
  for (std::size_t i = 0; i < n1; ++i) {
    std::vector<double> s(n2);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n2; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < c; ++d) dot += double(q.at(i, d)) * double(k.at(j, d));
      s[j] = dot / scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < n2; ++j) {
      s[j] /= z;
      if (probs) probs->at(i, j) = static_cast<T>(s[j]);
    }
    for (std::size_t d = 0; d < c; ++d) {
      double acc = 0;
      for (std::size_t j = 0; j < n2; ++j) acc += s[j] * double(v.at(j, d));
      out.at(i, d) = static_cast<T>(acc);
    }
  }
  return out;
}

/// Columns [h·dh, (h+1)·dh) of x.
template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, std::size_t h, std::size_t dh) {
  Tensor<T> out({x.dim(0), dh});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t d = 0; d < dh; ++d) out.at(i, d) = x.at(i, h * dh + d);
  return out;
}

/// Multi-head attention assembled from per-head oracle calls.
template <typename T>
Tensor<T> multi_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                     double scale) {
  const std::size_t dh = q.dim(1) / heads;
  Tensor<T> out({q.dim(0), q.dim(1)});
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<T> o = attention(head_slice(q, h, dh), head_slice(k, h, dh), head_slice(v, h, dh), scale);
    for (std::size_t i = 0; i < q.dim(0); ++i)
      for (std::size_t d = 0; d < dh; ++d) out.at(i, h * dh + d) = o.at(i, d);
  }
  return out;
}

/// y = x·W + b row by row.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < y.dim(1); ++j) y.at(i, j) += b[j];
  return y;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= double(d);
    for (std::size_t j = 0; j < d; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    var /= double(d);
    for (std::size_t j = 0; j < d; ++j)
      y.at(i, j) = static_cast<T>((x.at(i, j) - mean) / std::sqrt(var + eps) * gamma[j] + beta[j]);
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

template <typename T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.shape());
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(perm[i], j);
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace oracle
