#pragma once

// Elementwise, matrix, convolution, normalization and activation primitives.
// Every op has an analytic backward recorded on the tape. All primitives are
// pure functions of their inputs; per-element reduction loops run in
// ascending index order.

#include <cmath>
#include <cstddef>
#include <string>

#include "evtrack/autodiff.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/gemm.hpp"
#include "evtrack/nd_array.hpp"
#include "evtrack/parallel.hpp"

namespace evtrack::ops {

template <typename T>
void require_finite(const NdArray<T>& a, const char* what) {
  if (!a.all_finite()) {
    throw NumericError(std::string(what) + ": non-finite input");
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) {
    const T e = std::exp(-x);
    return T{1} / (T{1} + e);
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T{20}) return x;
  if (x < T{-20}) return std::exp(x);
  return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// matmul / linear

// x: [..., K] @ W: [K, N] -> [..., N]. Bias (if non-null) broadcasts over the
// trailing axis; no other implicit broadcasting exists in this library.
template <typename T>
Var<T> linear_impl(Tape<T>& tape, const Var<T>& x, const Var<T>& W,
                   const Var<T>* b) {
  const auto& xs = x->value.shape();
  const auto& ws = W->value.shape();
  if (xs.empty() || ws.size() != 2 || xs.back() != ws[0]) {
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " +
                     shape_str(ws));
  }
  const std::size_t K = ws[0];
  const std::size_t N = ws[1];
  const std::size_t M = x->value.numel() / K;
  if (b != nullptr) {
    require_shape((*b)->value, {N}, "linear bias");
  }

  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(N);
  NdArray<T> y(out_shape);

  const T* bp = b ? (*b)->value.data() : nullptr;
  T* yp = y.data();
  if (bp) {
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) yp[m * N + n] = bp[n];
  }
  gemm_accumulate(M, N, K, x->value.data(), W->value.data(), yp);

  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, wv = W, bv = b ? *b : nullptr;
    tape.record([xv, wv, bv, out, M, K, N] {
      const NdArray<T>& dy = out->grad_buffer();
      const T* dyp = dy.data();
      if (xv->requires_grad) {
        // dx += dy @ W^T
        NdArray<T> wt({N, K});
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t n = 0; n < N; ++n)
            wt.at(n, k) = wv->value[k * N + n];
        gemm_accumulate(M, K, N, dyp, wt.data(), xv->grad_buffer().data());
      }
      if (wv->requires_grad) {
        // dW += x^T @ dy
        NdArray<T> xt({K, M});
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k)
            xt.at(k, m) = xv->value[m * K + k];
        gemm_accumulate(K, N, M, xt.data(), dyp, wv->grad_buffer().data());
      }
      if (bv && bv->requires_grad) {
        NdArray<T>& db = bv->grad_buffer();
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t n = 0; n < N; ++n) db[n] += dyp[m * N + n];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& W,
              const Var<T>& b) {
  return linear_impl(tape, x, W, &b);
}

template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& W) {
  return linear_impl(tape, x, W, static_cast<const Var<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T, typename FwdFn, typename BackFn>
Var<T> unary_elementwise(Tape<T>& tape, const Var<T>& x, FwdFn fwd,
                         BackFn dfn) {
  NdArray<T> y(x->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = fwd(x->value[i]);
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, dfn] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t i = 0; i < dx.numel(); ++i)
        dx[i] += dy[i] * dfn(xv->value[i], out->value[i]);
    });
  }
  return out;
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  require_finite(x->value, "sigmoid");
  return unary_elementwise(
      tape, x, [](T v) { return sigmoid_scalar(v); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> silu(Tape<T>& tape, const Var<T>& x) {
  require_finite(x->value, "silu");
  return unary_elementwise(
      tape, x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  return unary_elementwise(
      tape, x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> softplus(Tape<T>& tape, const Var<T>& x) {
  return unary_elementwise(
      tape, x, [](T v) { return softplus_scalar(v); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError("add: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  NdArray<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] + b->value[i];
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> av = a, bv = b;
    tape.record([av, bv, out] {
      const NdArray<T>& dy = out->grad_buffer();
      if (av->requires_grad) accumulate(av->grad_buffer(), dy);
      if (bv->requires_grad) accumulate(bv->grad_buffer(), dy);
    });
  }
  return out;
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError("mul: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  NdArray<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] * b->value[i];
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> av = a, bv = b;
    tape.record([av, bv, out] {
      const NdArray<T>& dy = out->grad_buffer();
      if (av->requires_grad) {
        NdArray<T>& da = av->grad_buffer();
        for (std::size_t i = 0; i < da.numel(); ++i)
          da[i] += dy[i] * bv->value[i];
      }
      if (bv->requires_grad) {
        NdArray<T>& db = bv->grad_buffer();
        for (std::size_t i = 0; i < db.numel(); ++i)
          db[i] += dy[i] * av->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T c) {
  return unary_elementwise(
      tape, x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
  auto out = make_var(x->value.reshaped(shape));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

// Concatenate two [B, L, C] sequences along the token axis.
template <typename T>
Var<T> concat_tokens(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2]) {
    throw ShapeError("concat_tokens: " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  const std::size_t B = sa[0], La = sa[1], Lb = sb[1], C = sa[2];
  NdArray<T> y({B, La + Lb, C});
  for (std::size_t bi = 0; bi < B; ++bi) {
    T* dst = y.data() + bi * (La + Lb) * C;
    const T* pa = a->value.data() + bi * La * C;
    const T* pb = b->value.data() + bi * Lb * C;
    std::copy(pa, pa + La * C, dst);
    std::copy(pb, pb + Lb * C, dst + La * C);
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> av = a, bv = b;
    tape.record([av, bv, out, B, La, Lb, C] {
      const NdArray<T>& dy = out->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* src = dy.data() + bi * (La + Lb) * C;
        if (av->requires_grad) {
          T* da = av->grad_buffer().data() + bi * La * C;
          for (std::size_t i = 0; i < La * C; ++i) da[i] += src[i];
        }
        if (bv->requires_grad) {
          T* db = bv->grad_buffer().data() + bi * Lb * C;
          for (std::size_t i = 0; i < Lb * C; ++i) db[i] += src[La * C + i];
        }
      }
    });
  }
  return out;
}

// Token slice [start, start+len) of a [B, L, C] sequence.
template <typename T>
Var<T> slice_tokens(Tape<T>& tape, const Var<T>& x, std::size_t start,
                    std::size_t len) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || start + len > s[1]) {
    throw ShapeError("slice_tokens: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") of " + shape_str(s));
  }
  const std::size_t B = s[0], L = s[1], C = s[2];
  NdArray<T> y({B, len, C});
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* src = x->value.data() + (bi * L + start) * C;
    std::copy(src, src + len * C, y.data() + bi * len * C);
  }
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, B, L, C, start, len] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi) {
        T* dst = dx.data() + (bi * L + start) * C;
        const T* src = dy.data() + bi * len * C;
        for (std::size_t i = 0; i < len * C; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Reverses the token axis of a [B, L, C] sequence.
template <typename T>
Var<T> reverse_tokens(Tape<T>& tape, const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw ShapeError("reverse_tokens: need rank 3, got " + shape_str(s));
  const std::size_t B = s[0], L = s[1], C = s[2];
  NdArray<T> y(s);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t l = 0; l < L; ++l) {
      const T* src = x->value.data() + (bi * L + l) * C;
      T* dst = y.data() + (bi * L + (L - 1 - l)) * C;
      std::copy(src, src + C, dst);
    }
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, B, L, C] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t l = 0; l < L; ++l) {
          const T* src = dy.data() + (bi * L + (L - 1 - l)) * C;
          T* dst = dx.data() + (bi * L + l) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
  }
  return out;
}

// Channel slice [start, start+len) of a [B, L, C] sequence.
template <typename T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::size_t start,
                      std::size_t len) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || start + len > s[2]) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") of " + shape_str(s));
  }
  const std::size_t rows = s[0] * s[1], C = s[2];
  NdArray<T> y({s[0], s[1], len});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x->value.data() + r * C + start;
    std::copy(src, src + len, y.data() + r * len);
  }
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, rows, C, start, len] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T* dst = dx.data() + r * C + start;
        const T* src = dy.data() + r * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// [B, L, C] + [C] broadcast over the trailing axis.
template <typename T>
Var<T> add_channel_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias) {
  const auto& s = x->value.shape();
  const std::size_t C = s.back();
  require_shape(bias->value, {C}, "add_channel_bias");
  const std::size_t rows = x->value.numel() / C;
  NdArray<T> y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x->value.data() + r * C;
    T* yp = y.data() + r * C;
    for (std::size_t c = 0; c < C; ++c) yp[c] = xp[c] + bias->value[c];
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, bv = bias;
    tape.record([xv, bv, out, rows, C] {
      const NdArray<T>& dy = out->grad_buffer();
      if (xv->requires_grad) accumulate(xv->grad_buffer(), dy);
      if (bv->requires_grad) {
        NdArray<T>& db = bv->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
      }
    });
  }
  return out;
}

// y = -exp(x), the strictly-negative rate parameterization.
template <typename T>
Var<T> neg_exp(Tape<T>& tape, const Var<T>& x) {
  return unary_elementwise(
      tape, x, [](T v) { return -std::exp(v); }, [](T, T y) { return y; });
}

// Concatenate [B, L, C1] and [B, L, C2] along the channel axis.
template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[1] != sb[1]) {
    throw ShapeError("concat_channels: " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  const std::size_t B = sa[0], L = sa[1], Ca = sa[2], Cb = sb[2];
  NdArray<T> y({B, L, Ca + Cb});
  for (std::size_t r = 0; r < B * L; ++r) {
    const T* pa = a->value.data() + r * Ca;
    const T* pb = b->value.data() + r * Cb;
    T* dst = y.data() + r * (Ca + Cb);
    std::copy(pa, pa + Ca, dst);
    std::copy(pb, pb + Cb, dst + Ca);
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> av = a, bv = b;
    tape.record([av, bv, out, B, L, Ca, Cb] {
      const NdArray<T>& dy = out->grad_buffer();
      for (std::size_t r = 0; r < B * L; ++r) {
        const T* src = dy.data() + r * (Ca + Cb);
        if (av->requires_grad) {
          T* da = av->grad_buffer().data() + r * Ca;
          for (std::size_t c = 0; c < Ca; ++c) da[c] += src[c];
        }
        if (bv->requires_grad) {
          T* db = bv->grad_buffer().data() + r * Cb;
          for (std::size_t c = 0; c < Cb; ++c) db[c] += src[Ca + c];
        }
      }
    });
  }
  return out;
}

// Mean over the token axis: [B, L, C] -> [B, C].
template <typename T>
Var<T> mean_tokens(Tape<T>& tape, const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw ShapeError("mean_tokens: need rank 3, got " + shape_str(s));
  const std::size_t B = s[0], L = s[1], C = s[2];
  NdArray<T> y({B, C});
  const T inv = T{1} / static_cast<T>(L);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c)
        y.at(bi, c) += x->value.at(bi, l, c) * inv;
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, B, L, C, inv] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t c = 0; c < C; ++c)
            dx.at(bi, l, c) += dy.at(bi, c) * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax over the trailing axis

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma,
                  const Var<T>& beta, T eps = static_cast<T>(1e-6)) {
  require_finite(x->value, "layer_norm");
  const auto& s = x->value.shape();
  if (s.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t D = s.back();
  const std::size_t rows = x->value.numel() / D;
  require_shape(gamma->value, {D}, "layer_norm gamma");
  require_shape(beta->value, {D}, "layer_norm beta");

  NdArray<T> y(s);
  NdArray<T> xhat(s);
  NdArray<T> inv_std({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x->value.data() + r * D;
    T mean = 0;
    for (std::size_t d = 0; d < D; ++d) mean += xr[d];
    mean /= static_cast<T>(D);
    T var = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const T c = xr[d] - mean;
      var += c * c;
    }
    var /= static_cast<T>(D);
    const T istd = T{1} / std::sqrt(var + eps);
    inv_std[r] = istd;
    T* xh = xhat.data() + r * D;
    T* yr = y.data() + r * D;
    for (std::size_t d = 0; d < D; ++d) {
      xh[d] = (xr[d] - mean) * istd;
      yr[d] = gamma->value[d] * xh[d] + beta->value[d];
    }
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, gv = gamma, bv = beta;
    auto xh = std::make_shared<NdArray<T>>(std::move(xhat));
    auto istd = std::make_shared<NdArray<T>>(std::move(inv_std));
    tape.record([xv, gv, bv, out, xh, istd, rows, D] {
      const NdArray<T>& dy = out->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy.data() + r * D;
        const T* xhr = xh->data() + r * D;
        if (gv->requires_grad) {
          NdArray<T>& dg = gv->grad_buffer();
          for (std::size_t d = 0; d < D; ++d) dg[d] += dyr[d] * xhr[d];
        }
        if (bv->requires_grad) {
          NdArray<T>& db = bv->grad_buffer();
          for (std::size_t d = 0; d < D; ++d) db[d] += dyr[d];
        }
        if (xv->requires_grad) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t d = 0; d < D; ++d) {
            const T g = dyr[d] * gv->value[d];
            sum_g += g;
            sum_gx += g * xhr[d];
          }
          const T inv_d = T{1} / static_cast<T>(D);
          NdArray<T>& dx = xv->grad_buffer();
          T* dxr = dx.data() + r * D;
          for (std::size_t d = 0; d < D; ++d) {
            const T g = dyr[d] * gv->value[d];
            dxr[d] += (*istd)[r] * (g - sum_g * inv_d - xhr[d] * sum_gx * inv_d);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
void softmax_rows(const NdArray<T>& x, NdArray<T>& y) {
  const std::size_t D = x.shape().back();
  const std::size_t rows = x.numel() / D;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * D;
    T* yr = y.data() + r * D;
    T mx = xr[0];
    for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
    T sum = 0;
    for (std::size_t d = 0; d < D; ++d) {
      yr[d] = std::exp(xr[d] - mx);
      sum += yr[d];
    }
    const T inv = T{1} / sum;
    for (std::size_t d = 0; d < D; ++d) yr[d] *= inv;
  }
}

}  // namespace detail

template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x) {
  require_finite(x->value, "softmax");
  NdArray<T> y(x->value.shape());
  detail::softmax_rows(x->value, y);
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out] {
      const std::size_t D = out->value.shape().back();
      const std::size_t rows = out->value.numel() / D;
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* sr = out->value.data() + r * D;
        const T* dyr = dy.data() + r * D;
        T dot = 0;
        for (std::size_t d = 0; d < D; ++d) dot += dyr[d] * sr[d];
        T* dxr = dx.data() + r * D;
        for (std::size_t d = 0; d < D; ++d) dxr[d] += sr[d] * (dyr[d] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> log_softmax(Tape<T>& tape, const Var<T>& x) {
  require_finite(x->value, "log_softmax");
  const std::size_t D = x->value.shape().back();
  const std::size_t rows = x->value.numel() / D;
  NdArray<T> y(x->value.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x->value.data() + r * D;
    T* yr = y.data() + r * D;
    T mx = xr[0];
    for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
    T sum = 0;
    for (std::size_t d = 0; d < D; ++d) sum += std::exp(xr[d] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t d = 0; d < D; ++d) yr[d] = xr[d] - lse;
  }
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, rows, D] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy.data() + r * D;
        const T* yr = out->value.data() + r * D;
        T sum = 0;
        for (std::size_t d = 0; d < D; ++d) sum += dyr[d];
        T* dxr = dx.data() + r * D;
        for (std::size_t d = 0; d < D; ++d)
          dxr[d] += dyr[d] - std::exp(yr[d]) * sum;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// depthwise causal 1d convolution

// y[b,l,c] = sum_k x[b,l-k,c] * kernel[c,k], zero-padded on the left, so the
// output keeps length L and mixes only current and past tokens.
template <typename T>
Var<T> depthwise_conv1d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernel) {
  const auto& s = x->value.shape();
  const auto& ks = kernel->value.shape();
  if (s.size() != 3 || ks.size() != 2 || ks[0] != s[2]) {
    throw ShapeError("depthwise_conv1d: input " + shape_str(s) + " vs kernel " +
                     shape_str(ks));
  }
  const std::size_t B = s[0], L = s[1], C = s[2], K = ks[1];
  // With K-1 left padding the padded length is L+K-1, so the kernel only
  // overflows it when the sequence is empty.
  if (K < 1 || L < 1) {
    throw ParamError("depthwise_conv1d: kernel width " + std::to_string(K) +
                     " exceeds padded length " +
                     std::to_string(L + (K > 0 ? K - 1 : 0)));
  }
  NdArray<T> y({B, L, C});
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t kmax = std::min(K, l + 1);
      T* yr = y.data() + (bi * L + l) * C;
      for (std::size_t k = 0; k < kmax; ++k) {
        const T* xr = x->value.data() + (bi * L + (l - k)) * C;
        const T* w = kernel->value.data();
        for (std::size_t c = 0; c < C; ++c) yr[c] += xr[c] * w[c * K + k];
      }
    }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, kv = kernel;
    tape.record([xv, kv, out, B, L, C, K] {
      const NdArray<T>& dy = out->grad_buffer();
      if (xv->requires_grad) {
        NdArray<T>& dx = xv->grad_buffer();
        for (std::size_t bi = 0; bi < B; ++bi)
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t kmax = std::min(K, l + 1);
            const T* dyr = dy.data() + (bi * L + l) * C;
            for (std::size_t k = 0; k < kmax; ++k) {
              T* dxr = dx.data() + (bi * L + (l - k)) * C;
              const T* w = kv->value.data();
              for (std::size_t c = 0; c < C; ++c)
                dxr[c] += dyr[c] * w[c * K + k];
            }
          }
      }
      if (kv->requires_grad) {
        NdArray<T>& dk = kv->grad_buffer();
        for (std::size_t bi = 0; bi < B; ++bi)
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t kmax = std::min(K, l + 1);
            const T* dyr = dy.data() + (bi * L + l) * C;
            for (std::size_t k = 0; k < kmax; ++k) {
              const T* xr = xv->value.data() + (bi * L + (l - k)) * C;
              for (std::size_t c = 0; c < C; ++c)
                dk[c * K + k] += dyr[c] * xr[c];
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2d convolution + batch norm (tracking head building blocks)

namespace detail {

// im2col for same-padded convolution: col[p, q] with p a flat output pixel
// and q = (ci*Kh + kh)*Kw + kw; out-of-image taps are zero.
template <typename T>
NdArray<T> im2col(const NdArray<T>& x, std::size_t batch, std::size_t Kh,
                  std::size_t Kw) {
  const std::size_t Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Q = Cin * Kh * Kw;
  const auto ph = static_cast<std::ptrdiff_t>(Kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(Kw / 2);
  NdArray<T> col({H * W, Q});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      T* row = col.data() + (i * W + j) * Q;
      std::size_t q = 0;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const T* xp = x.data() + (batch * Cin + ci) * H * W;
        for (std::size_t kh = 0; kh < Kh; ++kh) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + kh) - ph;
          for (std::size_t kw = 0; kw < Kw; ++kw, ++q) {
            const std::ptrdiff_t sj =
                static_cast<std::ptrdiff_t>(j + kw) - pw;
            row[q] = (si < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
                      sj < 0 || sj >= static_cast<std::ptrdiff_t>(W))
                         ? T{0}
                         : xp[static_cast<std::size_t>(si) * W +
                              static_cast<std::size_t>(sj)];
          }
        }
      }
    }
  return col;
}

// Scatter-add of a column gradient back onto the padded input.
template <typename T>
void col2im_add(const NdArray<T>& dcol, std::size_t batch, std::size_t Kh,
                std::size_t Kw, NdArray<T>& dx) {
  const std::size_t Cin = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const std::size_t Q = Cin * Kh * Kw;
  const auto ph = static_cast<std::ptrdiff_t>(Kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(Kw / 2);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const T* row = dcol.data() + (i * W + j) * Q;
      std::size_t q = 0;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        T* dxp = dx.data() + (batch * Cin + ci) * H * W;
        for (std::size_t kh = 0; kh < Kh; ++kh) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + kh) - ph;
          for (std::size_t kw = 0; kw < Kw; ++kw, ++q) {
            const std::ptrdiff_t sj =
                static_cast<std::ptrdiff_t>(j + kw) - pw;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(H) || sj < 0 ||
                sj >= static_cast<std::ptrdiff_t>(W))
              continue;
            dxp[static_cast<std::size_t>(si) * W +
                static_cast<std::size_t>(sj)] += row[q];
          }
        }
      }
    }
}

}  // namespace detail

// x: [B, Cin, H, W], w: [Cout, Cin, Kh, Kw], same-padding with pad = K/2.
// Lowered to im2col + matrix multiply.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w,
              const Var<T>& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1]) {
    throw ShapeError("conv2d: input " + shape_str(xs) + " vs weight " +
                     shape_str(ws));
  }
  const std::size_t B = xs[0], H = xs[2], W = xs[3];
  const std::size_t Cout = ws[0], Kh = ws[2], Kw = ws[3];
  require_shape(b->value, {Cout}, "conv2d bias");
  const std::size_t HW = H * W;
  const std::size_t Q = ws[1] * Kh * Kw;

  // w^T once per call: [Q, Cout].
  NdArray<T> wt({Q, Cout});
  for (std::size_t co = 0; co < Cout; ++co)
    for (std::size_t q = 0; q < Q; ++q)
      wt.at(q, co) = w->value[co * Q + q];

  NdArray<T> y({B, Cout, H, W});
  auto cols = std::make_shared<std::vector<NdArray<T>>>();
  for (std::size_t bi = 0; bi < B; ++bi) {
    NdArray<T> col = detail::im2col(x->value, bi, Kh, Kw);
    // yt[p, co] = col[p, :] @ wt[:, co]
    NdArray<T> yt({HW, Cout});
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t co = 0; co < Cout; ++co)
        yt.at(p, co) = b->value[co];
    gemm_accumulate(HW, Cout, Q, col.data(), wt.data(), yt.data());
    T* yp = y.data() + bi * Cout * HW;
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t co = 0; co < Cout; ++co)
        yp[co * HW + p] = yt.at(p, co);
    if (tape.enabled()) cols->push_back(std::move(col));
  }

  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, wv = w, bv = b;
    tape.record([xv, wv, bv, out, cols, B, Cout, HW, Q, Kh, Kw] {
      const NdArray<T>& dy = out->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* dyp = dy.data() + bi * Cout * HW;
        if (bv->requires_grad) {
          NdArray<T>& db = bv->grad_buffer();
          for (std::size_t co = 0; co < Cout; ++co) {
            T acc = 0;
            for (std::size_t p = 0; p < HW; ++p) acc += dyp[co * HW + p];
            db[co] += acc;
          }
        }
        // dW[co, q] += sum_p dy[co, p] * col[p, q]
        if (wv->requires_grad) {
          gemm_accumulate(Cout, Q, HW, dyp, (*cols)[bi].data(),
                          wv->grad_buffer().data());
        }
        // dcol[p, q] = sum_co dy[co, p] * w[co, q], then scatter.
        if (xv->requires_grad) {
          NdArray<T> dyt({HW, Cout});
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t p = 0; p < HW; ++p)
              dyt.at(p, co) = dyp[co * HW + p];
          NdArray<T> dcol({HW, Q});
          gemm_accumulate(HW, Q, Cout, dyt.data(), wv->value.data(),
                          dcol.data());
          detail::col2im_add(dcol, bi, Kh, Kw, xv->grad_buffer());
        }
      }
    });
  }
  return out;
}

// Per-channel normalization over (batch, H, W) using the statistics of the
// current batch; no running moments are kept.
template <typename T>
Var<T> batch_norm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma,
                    const Var<T>& beta, T eps = static_cast<T>(1e-5)) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw ShapeError("batch_norm2d: need rank 4, got " + shape_str(s));
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  require_shape(gamma->value, {C}, "batch_norm2d gamma");
  require_shape(beta->value, {C}, "batch_norm2d beta");
  const std::size_t HW = H * W;
  const std::size_t n = B * HW;

  NdArray<T> y(s);
  NdArray<T> xhat(s);
  NdArray<T> inv_std({C});
  for (std::size_t c = 0; c < C; ++c) {
    T mean = 0;
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xp = x->value.data() + (bi * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) mean += xp[p];
    }
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xp = x->value.data() + (bi * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) {
        const T d = xp[p] - mean;
        var += d * d;
      }
    }
    var /= static_cast<T>(n);
    const T istd = T{1} / std::sqrt(var + eps);
    inv_std[c] = istd;
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xp = x->value.data() + (bi * C + c) * HW;
      T* xh = xhat.data() + (bi * C + c) * HW;
      T* yp = y.data() + (bi * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) {
        xh[p] = (xp[p] - mean) * istd;
        yp[p] = gamma->value[c] * xh[p] + beta->value[c];
      }
    }
  }
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    Var<T> xv = x, gv = gamma, bv = beta;
    auto xh = std::make_shared<NdArray<T>>(std::move(xhat));
    auto istd = std::make_shared<NdArray<T>>(std::move(inv_std));
    tape.record([xv, gv, bv, out, xh, istd, B, C, HW, n] {
      const NdArray<T>& dy = out->grad_buffer();
      for (std::size_t c = 0; c < C; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t bi = 0; bi < B; ++bi) {
          const T* dyp = dy.data() + (bi * C + c) * HW;
          const T* xp = xh->data() + (bi * C + c) * HW;
          for (std::size_t p = 0; p < HW; ++p) {
            sum_g += dyp[p];
            sum_gx += dyp[p] * xp[p];
          }
        }
        if (gv->requires_grad) gv->grad_buffer()[c] += sum_gx;
        if (bv->requires_grad) bv->grad_buffer()[c] += sum_g;
        if (xv->requires_grad) {
          const T g = gv->value[c];
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t bi = 0; bi < B; ++bi) {
            const T* dyp = dy.data() + (bi * C + c) * HW;
            const T* xp = xh->data() + (bi * C + c) * HW;
            T* dxp = xv->grad_buffer().data() + (bi * C + c) * HW;
            for (std::size_t p = 0; p < HW; ++p) {
              dxp[p] += g * (*istd)[c] *
                        (dyp[p] - sum_g * inv_n - xp[p] * sum_gx * inv_n);
            }
          }
        }
      }
    });
  }
  return out;
}

// Extracts x[:, :, i, j] from a [B, C, G, G] map -> [B, C].
template <typename T>
Var<T> gather_cell(Tape<T>& tape, const Var<T>& x, std::size_t i,
                   std::size_t j) {
  const auto& s = x->value.shape();
  if (s.size() != 4 || i >= s[2] || j >= s[3]) {
    throw ShapeError("gather_cell: (" + std::to_string(i) + "," +
                     std::to_string(j) + ") of " + shape_str(s));
  }
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  NdArray<T> y({B, C});
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t c = 0; c < C; ++c)
      y.at(bi, c) = x->value.at(bi, c, i, j);
  auto out = make_var(std::move(y));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, B, C, H, W, i, j] {
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c)
          dx.at(bi, c, i, j) += dy.at(bi, c);
    });
  }
  return out;
}

// Mean of all elements -> scalar, used to combine per-sample losses.
template <typename T>
Var<T> mean_all(Tape<T>& tape, const Var<T>& x) {
  const std::size_t n = x->value.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x->value[i];
  auto out = make_var(NdArray<T>::scalar(acc / static_cast<T>(n)));
  if (tape.enabled() && x->requires_grad) {
    Var<T> xv = x;
    tape.record([xv, out, n] {
      const T g = out->grad_buffer()[0] / static_cast<T>(n);
      NdArray<T>& dx = xv->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

}  // namespace evtrack::ops
