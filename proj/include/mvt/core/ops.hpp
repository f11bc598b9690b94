#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"
#include "mvt/core/kernels.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and
// records a closure that maps the output gradient onto its inputs.
//
// Row-wise ops (softmax, variance, cross_entropy, layer_norm) act on the last
// dimension and treat everything before it as a batch of rows.

namespace mvt {

namespace detail {

template <std::floating_point T>
void check_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) {
    throw TapeError(std::string(op) + ": operands live on different tapes");
  }
}

template <std::floating_point T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] += s[i];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const auto ia = a.id(), ib = b.id();
  auto& tape = a.tape();
  return tape.push(std::move(out), a.needs_grad() || b.needs_grad(),
                   [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                     if (t.needs_grad(ia)) detail::add_into(t.grad(ia), g);
                     if (t.needs_grad(ib)) detail::add_into(t.grad(ib), g);
                   });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.needs_grad() || b.needs_grad(),
                       [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                         if (t.needs_grad(ia)) detail::add_into(t.grad(ia), g);
                         if (t.needs_grad(ib)) {
                           auto& gb = t.grad(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                         }
                       });
}

template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.needs_grad() || b.needs_grad(),
                       [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                         const auto& av = t.value(ia);
                         const auto& bv = t.value(ib);
                         if (t.needs_grad(ia)) {
                           auto& ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                         }
                         if (t.needs_grad(ib)) {
                           auto& gb = t.grad(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                         }
                       });
}

/// a * s + c for scalars s, c.
template <std::floating_point T>
Var<T> affine(const Var<T>& a, T s, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v * s + c;
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia, s](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  return affine(a, s, T{0});
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return affine(a, T{1}, c);
}

template <std::floating_point T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::abs(v);
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += x[i] > T{0} ? g[i] : (x[i] < T{0} ? -g[i] : T{0});
    }
  });
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    if (v >= T{0}) {
      v = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T{1} + e);
    }
  }
  const auto ia = a.id();
  auto saved = std::make_shared<Tensor<T>>(out);
  return a.tape().push(std::move(out), a.needs_grad(),
                       [ia, saved](Tape<T>& t, const Tensor<T>& g) {
                         const auto& yv = *saved;
                         auto& ga = t.grad(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga[i] += g[i] * yv[i] * (T{1} - yv[i]);
                         }
                       });
}

/// Exact (erf) GELU.
template <std::floating_point T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T(0.5) * v * (T{1} + std::erf(v * inv_sqrt2));
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape<T>& t, const Tensor<T>& g) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    const auto& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T{1} + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (auto v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().push(Tensor<T>::scalar(s), a.needs_grad(),
                       [ia](Tape<T>& t, const Tensor<T>& g) {
                         auto& ga = t.grad(ia);
                         for (auto& v : ga.data()) v += g[0];
                       });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

/// Per-row arithmetic mean over the last dimension; result has one entry per row.
template <std::floating_point T>
Var<T> row_mean(const Var<T>& a) {
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    T s{0};
    for (auto v : x.row(i)) s += v;
    out[i] = s / static_cast<T>(c);
  }
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(ia);
    const std::size_t c = ga.cols();
    for (std::size_t i = 0; i < ga.rows(); ++i) {
      const T gi = g[i] / static_cast<T>(c);
      for (auto& v : ga.row(i)) v += gi;
    }
  });
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape<T>& t, const Tensor<T>& g) {
    detail::add_into(t.grad(ia), g.reshaped(t.value(ia).shape()));
  });
}

/// Selects rows of a (treated as a matrix) in the given order.
template <std::floating_point T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> index) {
  const auto& x = a.value();
  const std::size_t c = x.cols();
  if (index.empty()) {
    throw ShapeError("gather_rows: empty index");
  }
  Tensor<T> out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) {
      throw IndexError("gather_rows: row index out of range");
    }
    std::copy_n(x.row(index[i]).begin(), c, out.row(i).begin());
  }
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(),
                       [ia, idx = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
                         auto& ga = t.grad(ia);
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                           auto dst = ga.row(idx[i]);
                           auto src = g.row(i);
                           for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                         }
                       });
}

/// out[r, :] = x[r, :] * s[r]; s holds one scalar per row of x.
template <std::floating_point T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& s) {
  detail::check_same_tape(x, s, "scale_rows");
  const auto& xv = x.value();
  const auto& sv = s.value();
  if (sv.size() != xv.rows()) {
    throw ShapeError("scale_rows: need one scale per row, got " + shape_str(sv.shape()) +
                     " for " + shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (auto& v : out.row(r)) v *= sv[r];
  }
  const auto ix = x.id(), is = s.id();
  return x.tape().push(std::move(out), x.needs_grad() || s.needs_grad(),
                       [ix, is](Tape<T>& t, const Tensor<T>& g) {
                         const auto& xv = t.value(ix);
                         const auto& sv = t.value(is);
                         if (t.needs_grad(ix)) {
                           auto& gx = t.grad(ix);
                           for (std::size_t r = 0; r < g.rows(); ++r) {
                             auto dst = gx.row(r);
                             auto src = g.row(r);
                             for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * sv[r];
                           }
                         }
                         if (t.needs_grad(is)) {
                           auto& gs = t.grad(is);
                           for (std::size_t r = 0; r < g.rows(); ++r) {
                             T acc{0};
                             auto gr = g.row(r);
                             auto xr = xv.row(r);
                             for (std::size_t j = 0; j < gr.size(); ++j) acc += gr[j] * xr[j];
                             gs[r] += acc;
                           }
                         }
                       });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.needs_grad() || b.needs_grad(),
                       [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                         if (t.needs_grad(ia)) {
                           kernels::gemm_nt_acc(g.data().data(), t.value(ib).data().data(),
                                                t.grad(ia).data().data(), m, n, k);
                         }
                         if (t.needs_grad(ib)) {
                           kernels::gemm_tn_acc(t.value(ia).data().data(), g.data().data(),
                                                t.grad(ib).data().data(), m, k, n);
                         }
                       });
}

/// x[... x in] * weight[in x out] + bias[out]
template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::check_same_tape(x, weight, "linear");
  detail::check_same_tape(x, bias, "linear");
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  if (wv.ndim() != 2 || xv.cols() != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                     shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t m = xv.rows(), k = wv.dim(0), n = wv.dim(1);
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(bv.data().begin(), bv.data().end(), out.row(i).begin());
  }
  kernels::gemm_acc(xv.data().data(), wv.data().data(), out.data().data(), m, k, n);
  const auto ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().push(
      std::move(out), x.needs_grad() || weight.needs_grad() || bias.needs_grad(),
      [ix, iw, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
        if (t.needs_grad(ix)) {
          kernels::gemm_nt_acc(g.data().data(), t.value(iw).data().data(),
                               t.grad(ix).data().data(), m, n, k);
        }
        if (t.needs_grad(iw)) {
          kernels::gemm_tn_acc(t.value(ix).data().data(), g.data().data(),
                               t.grad(iw).data().data(), m, k, n);
        }
        if (t.needs_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t i = 0; i < m; ++i) {
            auto gr = g.row(i);
            for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers and losses

/// Softmax over the last dimension, max-subtracted.
template <std::floating_point T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T mx = row[0];
    for (auto v : row) mx = std::max(mx, v);
    T s{0};
    for (auto& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : row) v /= s;
  }
  return out;
}

template <std::floating_point T>
Var<T> softmax(const Var<T>& a) {
  Tensor<T> out = softmax_rows(a.value());
  const auto ia = a.id();
  auto probs = std::make_shared<Tensor<T>>(out);
  return a.tape().push(std::move(out), a.needs_grad(),
                       [ia, probs](Tape<T>& t, const Tensor<T>& g) {
                         auto& ga = t.grad(ia);
                         for (std::size_t r = 0; r < g.rows(); ++r) {
                           auto y = probs->row(r);
                           auto gr = g.row(r);
                           T dot{0};
                           for (std::size_t j = 0; j < y.size(); ++j) dot += gr[j] * y[j];
                           auto dst = ga.row(r);
                           for (std::size_t j = 0; j < y.size(); ++j) dst[j] += y[j] * (gr[j] - dot);
                         }
                       });
}

/// Unbiased (K-1 denominator) variance of each row; one entry per row.
template <std::floating_point T>
Var<T> variance(const Var<T>& a) {
  const auto& x = a.value();
  const std::size_t k = x.cols();
  if (k < 2) {
    throw DomainError("variance: need at least two entries per row");
  }
  const std::size_t r = x.rows();
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.row(i);
    T m{0};
    for (auto v : row) m += v;
    m /= static_cast<T>(k);
    T s{0};
    for (auto v : row) s += (v - m) * (v - m);
    out[i] = s / static_cast<T>(k - 1);
  }
  const auto ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia, k](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      T m{0};
      for (auto v : row) m += v;
      m /= static_cast<T>(k);
      const T c = T{2} * g[i] / static_cast<T>(k - 1);
      auto dst = ga.row(i);
      for (std::size_t j = 0; j < k; ++j) dst[j] += c * (row[j] - m);
    }
  });
}

/// Per-row cross entropy -log softmax(logits)[label] via log-sum-exp.
template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto& x = logits.value();
  const std::size_t r = x.rows(), k = x.cols();
  if (labels.size() != r) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(r) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(l) + " out of range for " +
                       std::to_string(k) + " classes");
    }
  }
  Tensor<T> out({r});
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.row(i);
    T mx = row[0];
    for (auto v : row) mx = std::max(mx, v);
    T s{0};
    for (auto v : row) s += std::exp(v - mx);
    out[i] = mx + std::log(s) - row[static_cast<std::size_t>(labels[i])];
  }
  const auto ia = logits.id();
  return logits.tape().push(
      std::move(out), logits.needs_grad(),
      [ia, lab = std::vector<int>(labels.begin(), labels.end())](Tape<T>& t, const Tensor<T>& g) {
        const auto p = softmax_rows(t.value(ia));
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < p.rows(); ++i) {
          auto pr = p.row(i);
          auto dst = ga.row(i);
          for (std::size_t j = 0; j < pr.size(); ++j) {
            dst[j] += g[i] * (pr[j] - (static_cast<int>(j) == lab[i] ? T{1} : T{0}));
          }
        }
      });
}

template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, int label) {
  const int labels[1] = {label};
  return cross_entropy(logits, std::span<const int>(labels));
}

/// Standardize each row over the last dimension (population variance), then
/// apply gain and bias.
template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  detail::check_same_tape(x, gain, "layer_norm");
  detail::check_same_tape(x, bias, "layer_norm");
  const auto& xv = x.value();
  const std::size_t d = xv.cols(), r = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias length must equal last dimension " +
                     std::to_string(d));
  }
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(r);
  Tensor<T> out(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = xv.row(i);
    T m{0};
    for (auto v : row) m += v;
    m /= static_cast<T>(d);
    T var{0};
    for (auto v : row) var += (v - m) * (v - m);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    auto xh = xhat->row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (row[j] - m) * rs;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(
      std::move(out), x.needs_grad() || gain.needs_grad() || bias.needs_grad(),
      [ix, ig, ib, xhat, rstd, d](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = t.value(ig);
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          Tensor<T> dg(gv.shape()), db(gv.shape());
          for (std::size_t i = 0; i < g.rows(); ++i) {
            auto gr = g.row(i);
            auto xh = xhat->row(i);
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += gr[j] * xh[j];
              db[j] += gr[j];
            }
          }
          if (t.needs_grad(ig)) detail::add_into(t.grad(ig), dg);
          if (t.needs_grad(ib)) detail::add_into(t.grad(ib), db);
        }
        if (t.needs_grad(ix)) {
          auto& gx = t.grad(ix);
          std::vector<T> dxh(d);
          for (std::size_t i = 0; i < g.rows(); ++i) {
            auto gr = g.row(i);
            auto xh = xhat->row(i);
            T s1{0}, s2{0};
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = gr[j] * gv[j];
              s1 += dxh[j];
              s2 += dxh[j] * xh[j];
            }
            const T c = (*rstd)[i] / static_cast<T>(d);
            auto dst = gx.row(i);
            for (std::size_t j = 0; j < d; ++j) {
              dst[j] += c * (static_cast<T>(d) * dxh[j] - s1 - xh[j] * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Transformer-specific fused ops

/// Multi-head scaled dot-product self-attention.
///
/// `qkv` is [(batch*tokens) x 3D] with query, key and value blocks side by
/// side; head h uses columns [h*D/heads, (h+1)*D/heads) of each block. The
/// result is [(batch*tokens) x D]. When `probs_out` is given it receives the
/// attention weights as [batch x heads x tokens x tokens].
template <std::floating_point T>
Var<T> attention(const Var<T>& qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 Tensor<T>* probs_out = nullptr) {
  const auto& x = qkv.value();
  if (x.rows() != batch * tokens || x.cols() % 3 != 0) {
    throw ShapeError("attention: qkv shape " + shape_str(x.shape()) + " does not match batch " +
                     std::to_string(batch) + " x tokens " + std::to_string(tokens));
  }
  const std::size_t d = x.cols() / 3;
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const std::size_t w = 3 * d;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(batch * heads * tokens * tokens);
  Tensor<T> out({batch * tokens, d});
  const T* q = x.data().data();
  std::vector<T> srow(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * tokens;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      T* p = probs->data() + ((b * heads + h) * tokens) * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const T* qi = q + (base + i) * w + qo;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* kj = q + (base + j) * w + ko;
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          srow[j] = s * inv_sqrt;
          mx = std::max(mx, srow[j]);
        }
        T z{0};
        for (std::size_t j = 0; j < tokens; ++j) {
          srow[j] = std::exp(srow[j] - mx);
          z += srow[j];
        }
        T* o = out.data().data() + (base + i) * d + h * dh;
        for (std::size_t j = 0; j < tokens; ++j) {
          const T pij = srow[j] / z;
          p[i * tokens + j] = pij;
          const T* vj = q + (base + j) * w + vo;
          for (std::size_t c = 0; c < dh; ++c) o[c] += pij * vj[c];
        }
      }
    }
  }
  if (probs_out != nullptr) {
    *probs_out = Tensor<T>({batch, heads, tokens, tokens}, *probs);
  }
  const auto iq = qkv.id();
  return qkv.tape().push(
      std::move(out), qkv.needs_grad(),
      [iq, probs, batch, tokens, heads, d, dh, w, inv_sqrt](Tape<T>& t, const Tensor<T>& g) {
        const T* q = t.value(iq).data().data();
        T* gq = t.grad(iq).data().data();
        const T* go = g.data().data();
        std::vector<T> dp(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * tokens;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            const T* p = probs->data() + ((b * heads + h) * tokens) * tokens;
            for (std::size_t i = 0; i < tokens; ++i) {
              const T* goi = go + (base + i) * d + h * dh;
              // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
              T dot{0};
              for (std::size_t j = 0; j < tokens; ++j) {
                const T* vj = q + (base + j) * w + vo;
                T* gvj = gq + (base + j) * w + vo;
                const T pij = p[i * tokens + j];
                T s{0};
                for (std::size_t c = 0; c < dh; ++c) {
                  s += goi[c] * vj[c];
                  gvj[c] += pij * goi[c];
                }
                dp[j] = s;
                dot += s * pij;
              }
              const T* qi = q + (base + i) * w + qo;
              T* gqi = gq + (base + i) * w + qo;
              for (std::size_t j = 0; j < tokens; ++j) {
                const T ds = p[i * tokens + j] * (dp[j] - dot) * inv_sqrt;
                const T* kj = q + (base + j) * w + ko;
                T* gkj = gq + (base + j) * w + ko;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

/// Linear patch embedding plus positional table, with an optional class token.
///
/// `patches` is [(batch*n) x q]. With a class token the result is
/// [(batch*(n+1)) x D] where row 0 of each sample is class + pos[0] and row
/// i+1 is patch_i * weight + bias + pos[i+1]. Without it the result is
/// [(batch*n) x D] and pos has n rows.
template <std::floating_point T>
Var<T> patch_embed(const Var<T>& patches, const Var<T>& weight, const Var<T>& bias,
                   const Var<T>& pos, const std::optional<Var<T>>& cls, std::size_t batch) {
  const auto& pv = patches.value();
  const auto& wv = weight.value();
  const auto& posv = pos.value();
  if (batch == 0 || pv.rows() % batch != 0) {
    throw ShapeError("patch_embed: patch rows not divisible by batch");
  }
  const std::size_t n = pv.rows() / batch;
  const std::size_t q = pv.cols();
  if (wv.ndim() != 2 || wv.dim(0) != q) {
    throw ShapeError("patch_embed: projection expects " + std::to_string(wv.dim(0)) +
                     " inputs, patches have " + std::to_string(q));
  }
  const std::size_t d = wv.dim(1);
  const std::size_t lead = cls ? 1 : 0;
  const std::size_t t = n + lead;
  if (posv.rows() != t || posv.cols() != d) {
    throw ShapeError("patch_embed: positional table " + shape_str(posv.shape()) + " but " +
                     std::to_string(t) + " tokens of width " + std::to_string(d));
  }
  if (bias.value().size() != d || (cls && cls->value().size() != d)) {
    throw ShapeError("patch_embed: bias/class token width mismatch");
  }
  Tensor<T> z({batch * n, d});
  for (std::size_t r = 0; r < batch * n; ++r) {
    std::copy(bias.value().data().begin(), bias.value().data().end(), z.row(r).begin());
  }
  kernels::gemm_acc(pv.data().data(), wv.data().data(), z.data().data(), batch * n, q, d);
  Tensor<T> out({batch * t, d});
  for (std::size_t b = 0; b < batch; ++b) {
    if (cls) {
      auto o = out.row(b * t);
      for (std::size_t j = 0; j < d; ++j) o[j] = cls->value()[j] + posv.at(0, j);
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto o = out.row(b * t + lead + i);
      auto zi = z.row(b * n + i);
      for (std::size_t j = 0; j < d; ++j) o[j] = zi[j] + posv.at(lead + i, j);
    }
  }
  const auto ip = patches.id(), iw = weight.id(), ib = bias.id(), ipos = pos.id();
  const std::optional<std::size_t> icls = cls ? std::optional(cls->id()) : std::nullopt;
  const bool needs = patches.needs_grad() || weight.needs_grad() || bias.needs_grad() ||
                     pos.needs_grad() || (cls && cls->needs_grad());
  return patches.tape().push(
      std::move(out), needs,
      [ip, iw, ib, ipos, icls, batch, n, q, d, lead, t](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.needs_grad(ipos)) {
          auto& gp = tp.grad(ipos);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t r = 0; r < t; ++r) {
              auto src = g.row(b * t + r);
              auto dst = gp.row(r);
              for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
          }
        }
        if (icls && tp.needs_grad(*icls)) {
          auto& gc = tp.grad(*icls);
          for (std::size_t b = 0; b < batch; ++b) {
            auto src = g.row(b * t);
            for (std::size_t j = 0; j < d; ++j) gc[j] += src[j];
          }
        }
        // Gradient w.r.t. the projected patches, without the class rows.
        Tensor<T> gz({batch * n, d});
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(g.row(b * t + lead + i).begin(), d, gz.row(b * n + i).begin());
          }
        }
        if (tp.needs_grad(ib)) {
          auto& gb = tp.grad(ib);
          for (std::size_t r = 0; r < batch * n; ++r) {
            auto src = gz.row(r);
            for (std::size_t j = 0; j < d; ++j) gb[j] += src[j];
          }
        }
        if (tp.needs_grad(iw)) {
          kernels::gemm_tn_acc(tp.value(ip).data().data(), gz.data().data(),
                               tp.grad(iw).data().data(), batch * n, q, d);
        }
        if (tp.needs_grad(ip)) {
          kernels::gemm_nt_acc(gz.data().data(), tp.value(iw).data().data(),
                               tp.grad(ip).data().data(), batch * n, d, q);
        }
      });
}

}  // namespace mvt
