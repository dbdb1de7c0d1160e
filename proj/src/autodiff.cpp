#include "lemevit/autodiff.hpp"

#include <cmath>

namespace lemevit {

namespace {

template <typename T>
Graph<T>& graph_of(const Var<T>& a) {
  if (!a.defined()) throw ContractError("op input is undefined");
  return a.graph();
}

template <typename T>
Tensor<T> grad_tensor(const Node<T>& out) {
  return Tensor<T>(out.val().shape(), out.grad);
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& g = graph_of(a);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> c = kernels::matmul(av, bv);
  const std::size_t batch = av.rank() == 3 ? av.dim(0) : 1;
  const std::size_t p = av.dim(av.rank() - 2), q = av.dim(av.rank() - 1),
                    r = bv.dim(bv.rank() - 1);
  g.add_macs(static_cast<std::uint64_t>(batch) * p * q * r);
  const bool shared_b = bv.rank() == 2;
  return g.record(std::move(c), {a, b}, [a, b, batch, p, q, r, shared_b](const Node<T>& out) {
    const T* dc = out.grad.data();
    const T* ad = a.value().data().data();
    const T* bd = b.value().data().data();
    auto da = grad_slot(a);
    auto db = grad_slot(b);
    if (shared_b) {
      if (!da.empty()) kernels::gemm_nt(batch * p, r, q, dc, bd, da.data(), true);
      if (!db.empty()) kernels::gemm_tn(q, batch * p, r, ad, dc, db.data(), true);
      return;
    }
    for (std::size_t n = 0; n < batch; ++n) {
      if (!da.empty()) {
        kernels::gemm_nt(p, r, q, dc + n * p * r, bd + n * q * r, da.data() + n * p * q, true);
      }
      if (!db.empty()) {
        kernels::gemm_tn(q, p, r, ad + n * p * q, dc + n * p * r, db.data() + n * q * r, true);
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  auto& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (wv.rank() != 2 || (xv.rank() != 1 && xv.rank() != 2) || xv.shape().back() != wv.dim(0)) {
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
  }
  const std::size_t n = xv.rank() == 2 ? xv.dim(0) : 1;
  const std::size_t in = wv.dim(0), out_dim = wv.dim(1);
  if (bias.defined() && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(wv.shape()));
  }
  Tensor<T> y(xv.rank() == 2 ? Shape{n, out_dim} : Shape{out_dim});
  kernels::gemm_nn(n, in, out_dim, xv.data().data(), wv.data().data(), y.data().data(), false);
  if (bias.defined()) {
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < n; ++i) {
      T* yi = y.data().data() + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) yi[j] += bv[j];
    }
  }
  g.add_macs(static_cast<std::uint64_t>(n) * in * out_dim);
  return g.record(std::move(y), {x, w, bias}, [x, w, bias, n, in, out_dim](const Node<T>& out) {
    const T* dy = out.grad.data();
    if (auto dx = grad_slot(x); !dx.empty()) {
      kernels::gemm_nt(n, out_dim, in, dy, w.value().data().data(), dx.data(), true);
    }
    if (auto dw = grad_slot(w); !dw.empty()) {
      kernels::gemm_tn(in, n, out_dim, x.value().data().data(), dy, dw.data(), true);
    }
    if (auto db = grad_slot(bias); !db.empty()) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy[i * out_dim + j];
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& g = graph_of(a);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  Tensor<T> c = a.value();
  c.clear_grad();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] += bv[i];
  return g.record(std::move(c), {a, b}, [a, b](const Node<T>& out) {
    for (const Var<T>* v : {&a, &b}) {
      if (auto d = grad_slot(*v); !d.empty()) {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& g = graph_of(a);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  Tensor<T> c = a.value();
  c.clear_grad();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] *= bv[i];
  return g.record(std::move(c), {a, b}, [a, b](const Node<T>& out) {
    if (auto da = grad_slot(a); !da.empty()) {
      const auto& bv = b.value();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += out.grad[i] * bv[i];
    }
    if (auto db = grad_slot(b); !db.empty()) {
      const auto& av = a.value();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += out.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  auto& g = graph_of(a);
  Tensor<T> c = a.value();
  c.clear_grad();
  for (auto& v : c.data()) v *= factor;
  return g.record(std::move(c), {a}, [a, factor](const Node<T>& out) {
    if (auto da = grad_slot(a); !da.empty()) {
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += out.grad[i] * factor;
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto& g = graph_of(a);
  T s = 0;
  for (auto v : a.value().data()) s += v;
  return g.record(Tensor<T>::scalar(s), {a}, [a](const Node<T>& out) {
    if (auto da = grad_slot(a); !da.empty()) {
      for (auto& d : da) d += out.grad[0];
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  auto& g = graph_of(a);
  Tensor<T> t = kernels::transpose(a.value());
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  return g.record(std::move(t), {a}, [a, rows, cols](const Node<T>& out) {
    if (auto da = grad_slot(a); !da.empty()) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += out.grad[j * rows + i];
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto& g = graph_of(a);
  Tensor<T> r = a.value().reshaped(std::move(shape));
  return g.record(std::move(r), {a}, [a](const Node<T>& out) {
    if (auto da = grad_slot(a); !da.empty()) {
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += out.grad[i];
    }
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  auto& g = graph_of(x);
  Tensor<T> y = kernels::softmax_rows(x.value());
  return g.record(std::move(y), {x}, [x](const Node<T>& out) {
    auto dx = grad_slot(x);
    if (dx.empty()) return;
    const auto& y = out.val();
    const std::size_t n = y.shape().back();
    const std::size_t rows = y.numel() / n;
    for (std::size_t i = 0; i < rows; ++i) {
      const T* yi = y.data().data() + i * n;
      const T* gi = out.grad.data() + i * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yi[j] * (gi[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  auto& g = graph_of(x);
  auto mean = std::make_shared<std::vector<T>>();
  auto rstd = std::make_shared<std::vector<T>>();
  Tensor<T> y = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps,
                                    g.recording() ? mean.get() : nullptr,
                                    g.recording() ? rstd.get() : nullptr);
  return g.record(std::move(y), {x, gamma, beta}, [x, gamma, beta, mean, rstd](const Node<T>& out) {
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const std::size_t d = xv.shape().back();
    const std::size_t rows = xv.numel() / d;
    auto dx = grad_slot(x);
    auto dg = grad_slot(gamma);
    auto db = grad_slot(beta);
    std::vector<T> xhat(d), gh(d);
    for (std::size_t i = 0; i < rows; ++i) {
      const T* xi = xv.data().data() + i * d;
      const T* dy = out.grad.data() + i * d;
      const T mu = (*mean)[i], rs = (*rstd)[i];
      T sum_g = 0, sum_gx = 0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xi[j] - mu) * rs;
        gh[j] = dy[j] * gv[j];
        sum_g += gh[j];
        sum_gx += gh[j] * xhat[j];
        if (!dg.empty()) dg[j] += dy[j] * xhat[j];
        if (!db.empty()) db[j] += dy[j];
      }
      if (dx.empty()) continue;
      const T inv_d = T{1} / static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        dx[i * d + j] += rs * (gh[j] - inv_d * sum_g - xhat[j] * inv_d * sum_gx);
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  auto& g = graph_of(x);
  Tensor<T> y = kernels::gelu(x.value());
  return g.record(std::move(y), {x}, [x](const Node<T>& out) {
    if (auto dx = grad_slot(x); !dx.empty()) {
      const auto& xv = x.value();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] += out.grad[i] * kernels::gelu_derivative(xv[i]);
      }
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const kernels::Conv2dGeometry& geom) {
  auto& g = graph_of(x);
  static const Tensor<T> kNoBias;
  Tensor<T> y = kernels::conv2d(x.value(), w.value(), bias.defined() ? bias.value() : kNoBias, geom);
  const auto& wv = w.value();
  g.add_macs(static_cast<std::uint64_t>(y.numel()) * wv.dim(1) * wv.dim(2) * wv.dim(3));
  return g.record(std::move(y), {x, w, bias}, [x, w, bias, geom](const Node<T>& out) {
    kernels::conv2d_backward(x.value(), w.value(), geom, grad_tensor(out), grad_slot(x),
                             grad_slot(w), grad_slot(bias));
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  auto& g = graph_of(x);
  Tensor<T> y = kernels::global_avg_pool(x.value());
  return g.record(std::move(y), {x}, [x](const Node<T>& out) {
    if (auto dx = grad_slot(x); !dx.empty()) {
      const std::size_t n = x.dim(0), d = x.dim(1);
      const T inv = T{1} / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += out.grad[j] * inv;
      }
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, T scale,
                 Tensor<T>* probs_out) {
  auto& g = graph_of(q);
  const bool keep = g.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<Tensor<T>>();
  Tensor<T> out = kernels::attention(q.value(), k.value(), v.value(), heads, scale,
                                     (keep || probs_out) ? probs.get() : nullptr);
  g.add_macs(2ull * q.dim(0) * k.dim(0) * q.dim(1));
  if (probs_out) *probs_out = *probs;
  if (!keep) probs.reset();
  return g.record(std::move(out), {q, k, v}, [q, k, v, heads, scale, probs](const Node<T>& out) {
    kernels::attention_backward(q.value(), k.value(), v.value(), heads, scale, *probs,
                                grad_tensor(out), grad_slot(q), grad_slot(k), grad_slot(v));
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t label, T smoothing) {
  auto& g = graph_of(logits);
  const auto& z = logits.value();
  const std::size_t c = z.numel();
  if (label >= c) {
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(c) + " classes");
  }
  Tensor<T> p = kernels::softmax_rows(z.reshaped({c}));
  std::vector<T> target(c, smoothing / static_cast<T>(c));
  target[label] += T{1} - smoothing;
  T loss = 0;
  T zmax = z[0];
  for (std::size_t i = 1; i < c; ++i) zmax = std::max(zmax, z[i]);
  T lse = 0;
  for (std::size_t i = 0; i < c; ++i) lse += std::exp(z[i] - zmax);
  lse = std::log(lse) + zmax;
  for (std::size_t i = 0; i < c; ++i) loss -= target[i] * (z[i] - lse);
  return g.record(Tensor<T>::scalar(loss), {logits},
                  [logits, p = std::move(p), target = std::move(target)](const Node<T>& out) {
                    if (auto dz = grad_slot(logits); !dz.empty()) {
                      for (std::size_t i = 0; i < dz.size(); ++i) {
                        dz[i] += out.grad[0] * (p[i] - target[i]);
                      }
                    }
                  });
}

#define LEMEVIT_INSTANTIATE_OPS(T)                                                              \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                       \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                         \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                         \
  template Var<T> scale<T>(const Var<T>&, T);                                                   \
  template Var<T> sum<T>(const Var<T>&);                                                        \
  template Var<T> transpose<T>(const Var<T>&);                                                  \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                             \
  template Var<T> softmax_rows<T>(const Var<T>&);                                               \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                \
  template Var<T> gelu<T>(const Var<T>&);                                                       \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&,                        \
                            const kernels::Conv2dGeometry&);                                    \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                            \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, T,     \
                               Tensor<T>*);                                                     \
  template Var<T> cross_entropy<T>(const Var<T>&, std::size_t, T);

LEMEVIT_INSTANTIATE_OPS(float)
LEMEVIT_INSTANTIATE_OPS(double)

#undef LEMEVIT_INSTANTIATE_OPS

}  // namespace lemevit
