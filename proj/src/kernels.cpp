#include "lemevit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lemevit::kernels {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + p * r, T{0});
  std::size_t i = 0;
  // Four output rows per pass so each row of b is streamed once per block.
  for (; i + 4 <= p; i += 4) {
    T* __restrict c0 = c + (i + 0) * r;
    T* __restrict c1 = c + (i + 1) * r;
    T* __restrict c2 = c + (i + 2) * r;
    T* __restrict c3 = c + (i + 3) * r;
    const T* a0 = a + (i + 0) * q;
    const T* a1 = a + (i + 1) * q;
    const T* a2 = a + (i + 2) * q;
    const T* a3 = a + (i + 3) * q;
    for (std::size_t k = 0; k < q; ++k) {
      const T* __restrict bk = b + k * r;
      const T x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      for (std::size_t j = 0; j < r; ++j) {
        const T bv = bk[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < p; ++i) {
    T* __restrict ci = c + i * r;
    const T* ai = a + i * q;
    for (std::size_t k = 0; k < q; ++k) {
      const T* __restrict bk = b + k * r;
      const T x = ai[k];
      for (std::size_t j = 0; j < r; ++j) ci[j] += x * bk[j];
    }
  }
}

template <typename T>
void gemm_tn(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + p * r, T{0});
  for (std::size_t k = 0; k < q; ++k) {
    const T* __restrict bk = b + k * r;
    const T* ak = a + k * p;
    for (std::size_t i = 0; i < p; ++i) {
      const T x = ak[i];
      T* __restrict ci = c + i * r;
      for (std::size_t j = 0; j < r; ++j) ci[j] += x * bk[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t p, std::size_t q, std::size_t r, const T* a, const T* b, T* c,
             bool accumulate) {
  std::vector<T> bt(q * r);
  for (std::size_t j = 0; j < r; ++j) {
    for (std::size_t k = 0; k < q; ++k) bt[k * r + j] = b[j * q + k];
  }
  gemm_nn(p, q, r, a, bt.data(), c, accumulate);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mismatch = [&] {
    return "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape());
  };
  if (a.rank() == 2 && b.rank() == 2) {
    require(a.dim(1) == b.dim(0), mismatch());
    Tensor<T> c({a.dim(0), b.dim(1)});
    gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data().data(), b.data().data(), c.data().data(),
            false);
    return c;
  }
  if (a.rank() == 3 && b.rank() == 2) {
    require(a.dim(2) == b.dim(0), mismatch());
    Tensor<T> c({a.dim(0), a.dim(1), b.dim(1)});
    gemm_nn(a.dim(0) * a.dim(1), a.dim(2), b.dim(1), a.data().data(), b.data().data(),
            c.data().data(), false);
    return c;
  }
  if (a.rank() == 3 && b.rank() == 3) {
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1), mismatch());
    const std::size_t batch = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
    Tensor<T> c({batch, p, r});
    for (std::size_t n = 0; n < batch; ++n) {
      gemm_nn(p, q, r, a.data().data() + n * p * q, b.data().data() + n * q * r,
              c.data().data() + n * p * r, false);
    }
    return c;
  }
  throw DimensionError(mismatch());
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out({cols, rows});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

namespace {

template <typename T>
void softmax_inplace(T* row, std::size_t n) {
  T m = row[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - m);
    sum += row[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require(x.defined(), "softmax_rows on undefined tensor");
  Tensor<T> out = x;
  out.clear_grad();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  for (std::size_t i = 0; i < rows; ++i) softmax_inplace(out.data().data() + i * n, n);
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     std::vector<T>* mean, std::vector<T>* rstd) {
  require(x.defined(), "layer_norm on undefined tensor");
  const std::size_t d = x.shape().back();
  require(gamma.numel() == d && beta.numel() == d,
          "layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " do not match width " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  if (mean) mean->assign(rows, T{0});
  if (rstd) rstd->assign(rows, T{0});
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x.data().data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    T* oi = out.data().data() + i * d;
    for (std::size_t j = 0; j < d; ++j) oi[j] = (xi[j] - mu) * rs * gamma[j] + beta[j];
    if (mean) (*mean)[i] = mu;
    if (rstd) (*rstd)[i] = rs;
  }
  return out;
}

template <typename T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x * (T{1} / std::numbers::sqrt2_v<T>)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * (T{1} / std::numbers::sqrt2_v<T>)));
  const T pdf = std::exp(T{-0.5} * x * x) * std::numbers::inv_sqrtpi_v<T> *
                (T{1} / std::numbers::sqrt2_v<T>);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = gelu(x[i]);
  return out;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (kernel == 0 || kernel > in + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel) +
                         " larger than padded input " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvDims {
  std::size_t cin, h, w, cout, k, ho, wo, cin_g, cout_g;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, const Conv2dGeometry& geom) {
  require(x.rank() == 3, "conv2d: input must be [C×H×W], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weight must be [Cout×Cin/g×k×k], got " + shape_str(w.shape()));
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " + shape_str(w.shape()));
  ConvDims d{};
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.k = w.dim(2);
  const std::size_t g = geom.groups;
  require(g >= 1 && d.cin % g == 0 && d.cout % g == 0,
          "conv2d: groups " + std::to_string(g) + " must divide Cin " + std::to_string(d.cin) +
              " and Cout " + std::to_string(d.cout));
  d.cin_g = d.cin / g;
  d.cout_g = d.cout / g;
  require(w.dim(1) == d.cin_g, "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                                   shape_str(x.shape()) + " and groups " + std::to_string(g));
  d.ho = conv_output_extent(d.h, d.k, geom.stride, geom.padding);
  d.wo = conv_output_extent(d.w, d.k, geom.stride, geom.padding);
  return d;
}

// cols[(cin_g·k·k) × (ho·wo)] for channels [c0, c0 + cin_g).
template <typename T>
void im2col(const T* x, const ConvDims& d, const Conv2dGeometry& geom, std::size_t c0, T* cols) {
  const std::size_t plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin_g; ++c) {
    const T* xc = x + (c0 + c) * d.h * d.w;
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = cols + ((c * d.k + ky) * d.k + kx) * plane;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) -
                          static_cast<std::ptrdiff_t>(geom.padding);
          T* out = row + oy * d.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(out, out + d.wo, T{0});
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) -
                            static_cast<std::ptrdiff_t>(geom.padding);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w))
                          ? T{0}
                          : xr[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, const Conv2dGeometry& geom, std::size_t c0,
                T* dx) {
  const std::size_t plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin_g; ++c) {
    T* dxc = dx + (c0 + c) * d.h * d.w;
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = cols + ((c * d.k + ky) * d.k + kx) * plane;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) -
                          static_cast<std::ptrdiff_t>(geom.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          T* xr = dxc + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) -
                            static_cast<std::ptrdiff_t>(geom.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            xr[static_cast<std::size_t>(ix)] += row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dGeometry& geom) {
  const ConvDims d = conv_dims(x, w, geom);
  if (bias.defined()) {
    require(bias.numel() == d.cout, "conv2d: bias " + shape_str(bias.shape()) +
                                        " does not match Cout " + std::to_string(d.cout));
  }
  const std::size_t plane = d.ho * d.wo;
  const std::size_t kdim = d.cin_g * d.k * d.k;
  Tensor<T> y({d.cout, d.ho, d.wo});
  std::vector<T> cols(kdim * plane);
  for (std::size_t g = 0; g < geom.groups; ++g) {
    im2col(x.data().data(), d, geom, g * d.cin_g, cols.data());
    gemm_nn(d.cout_g, kdim, plane, w.data().data() + g * d.cout_g * kdim, cols.data(),
            y.data().data() + g * d.cout_g * plane, false);
  }
  if (bias.defined()) {
    for (std::size_t c = 0; c < d.cout; ++c) {
      T* yc = y.data().data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) yc[i] += bias[c];
    }
  }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Conv2dGeometry& geom,
                     const Tensor<T>& dy, std::span<T> dx, std::span<T> dw, std::span<T> db) {
  const ConvDims d = conv_dims(x, w, geom);
  const std::size_t plane = d.ho * d.wo;
  const std::size_t kdim = d.cin_g * d.k * d.k;
  require(dy.numel() == d.cout * plane, "conv2d_backward: upstream gradient " +
                                            shape_str(dy.shape()) + " has the wrong size");
  if (!db.empty()) {
    for (std::size_t c = 0; c < d.cout; ++c) {
      const T* dyc = dy.data().data() + c * plane;
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += dyc[i];
      db[c] += s;
    }
  }
  if (dx.empty() && dw.empty()) return;
  std::vector<T> cols(kdim * plane);
  for (std::size_t g = 0; g < geom.groups; ++g) {
    const T* dyg = dy.data().data() + g * d.cout_g * plane;
    const T* wg = w.data().data() + g * d.cout_g * kdim;
    if (!dw.empty()) {
      im2col(x.data().data(), d, geom, g * d.cin_g, cols.data());
      gemm_nt(d.cout_g, plane, kdim, dyg, cols.data(), dw.data() + g * d.cout_g * kdim, true);
    }
    if (!dx.empty()) {
      gemm_tn(kdim, d.cout_g, plane, wg, dyg, cols.data(), false);
      col2im_add(cols.data(), d, geom, g * d.cin_g, dx.data());
    }
  }
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.rank() == 2, "global_avg_pool expects [N×D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> out({d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
  }
  for (auto& v : out.data()) v /= static_cast<T>(n);
  return out;
}

namespace {

template <typename T>
void gather_head(const Tensor<T>& src, std::size_t h, std::size_t dh, std::vector<T>& dst) {
  const std::size_t rows = src.dim(0), c = src.dim(1);
  dst.resize(rows * dh);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(src.data().data() + i * c + h * dh, dh, dst.data() + i * dh);
  }
}

template <typename T>
void scatter_head_add(const std::vector<T>& src, std::size_t h, std::size_t dh, std::size_t c,
                      std::span<T> dst) {
  const std::size_t rows = src.size() / dh;
  for (std::size_t i = 0; i < rows; ++i) {
    T* out = dst.data() + i * c + h * dh;
    for (std::size_t j = 0; j < dh; ++j) out[j] += src[i * dh + j];
  }
}

template <typename T>
void check_attention_shapes(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::size_t heads) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
          "attention expects matrices, got " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
              ", " + shape_str(v.shape()));
  require(q.dim(1) == k.dim(1) && k.dim(1) == v.dim(1),
          "attention: width mismatch between q " + shape_str(q.shape()) + ", k " +
              shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  require(k.dim(0) == v.dim(0), "attention: key " + shape_str(k.shape()) + " and value " +
                                    shape_str(v.shape()) + " lengths differ");
  require(heads >= 1 && q.dim(1) % heads == 0,
          "attention: " + std::to_string(heads) + " heads do not divide width " +
              std::to_string(q.dim(1)));
}

}  // namespace

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, T scale, Tensor<T>* probs) {
  check_attention_shapes(q, k, v, heads);
  const std::size_t n1 = q.dim(0), n2 = k.dim(0), c = q.dim(1), dh = c / heads;
  Tensor<T> out({n1, c});
  if (probs) *probs = Tensor<T>({heads, n1, n2});
  std::vector<T> qh, kh, vh, s(n1 * n2), oh(n1 * dh);
  const T inv_scale = T{1} / scale;
  for (std::size_t h = 0; h < heads; ++h) {
    gather_head(q, h, dh, qh);
    gather_head(k, h, dh, kh);
    gather_head(v, h, dh, vh);
    gemm_nt(n1, dh, n2, qh.data(), kh.data(), s.data(), false);
    for (auto& x : s) x *= inv_scale;
    for (std::size_t i = 0; i < n1; ++i) softmax_inplace(s.data() + i * n2, n2);
    if (probs) std::copy(s.begin(), s.end(), probs->data().data() + h * n1 * n2);
    gemm_nn(n1, n2, dh, s.data(), vh.data(), oh.data(), false);
    scatter_head_add(oh, h, dh, c, out.data());
  }
  return out;
}

template <typename T>
void attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        std::size_t heads, T scale, const Tensor<T>& probs, const Tensor<T>& dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv) {
  check_attention_shapes(q, k, v, heads);
  const std::size_t n1 = q.dim(0), n2 = k.dim(0), c = q.dim(1), dh = c / heads;
  require(probs.numel() == heads * n1 * n2, "attention_backward: probabilities have wrong size");
  std::vector<T> qh, kh, vh, doh, dp(n1 * n2), tmp_q(n1 * dh), tmp_kv(n2 * dh);
  const T inv_scale = T{1} / scale;
  for (std::size_t h = 0; h < heads; ++h) {
    const T* p = probs.data().data() + h * n1 * n2;
    gather_head(q, h, dh, qh);
    gather_head(k, h, dh, kh);
    gather_head(v, h, dh, vh);
    gather_head(dout, h, dh, doh);
    if (!dv.empty()) {
      gemm_tn(n2, n1, dh, p, doh.data(), tmp_kv.data(), false);
      scatter_head_add(tmp_kv, h, dh, c, dv);
    }
    if (dq.empty() && dk.empty()) continue;
    gemm_nt(n1, dh, n2, doh.data(), vh.data(), dp.data(), false);
    for (std::size_t i = 0; i < n1; ++i) {
      const T* pi = p + i * n2;
      T* dpi = dp.data() + i * n2;
      T dot = 0;
      for (std::size_t j = 0; j < n2; ++j) dot += dpi[j] * pi[j];
      for (std::size_t j = 0; j < n2; ++j) dpi[j] = pi[j] * (dpi[j] - dot) * inv_scale;
    }
    if (!dq.empty()) {
      gemm_nn(n1, n2, dh, dp.data(), kh.data(), tmp_q.data(), false);
      scatter_head_add(tmp_q, h, dh, c, dq);
    }
    if (!dk.empty()) {
      gemm_tn(n2, n1, dh, dp.data(), qh.data(), tmp_kv.data(), false);
      scatter_head_add(tmp_kv, h, dh, c, dk);
    }
  }
}

#define LEMEVIT_INSTANTIATE_KERNELS(T)                                                          \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,      \
                                   std::vector<T>*, std::vector<T>*);                            \
  template T gelu<T>(T);                                                                         \
  template T gelu_derivative<T>(T);                                                              \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               const Conv2dGeometry&);                                           \
  template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Conv2dGeometry&,    \
                                   const Tensor<T>&, std::span<T>, std::span<T>, std::span<T>);  \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  std::size_t, T, Tensor<T>*);                                   \
  template void attention_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      std::size_t, T, const Tensor<T>&, const Tensor<T>&,        \
                                      std::span<T>, std::span<T>, std::span<T>);

LEMEVIT_INSTANTIATE_KERNELS(float)
LEMEVIT_INSTANTIATE_KERNELS(double)

#undef LEMEVIT_INSTANTIATE_KERNELS

}  // namespace lemevit::kernels
