#pragma once

// Selective state-space scan with prompt-injected readout.
//
// Per batch b, channel c, state n and timestep l:
//   abar = exp(dt * a)
//   bbar = zoh(a, dt) * B[l,n],  zoh = (exp(dt*a) - 1) / a
//   h[l] = abar * h[l-1] + bbar * x[l]          (h[-1] = 0)
//   y[l] = sum_n (C[l,n] + P[l,n]) * h[l,n] + D[c] * x[l]
//
// zoh has a removable singularity at a -> 0; below |dt*a| <= 1e-6 the
// second-order series dt * (1 + dt*a/2) is used instead.
//
// The batch/channel axes may be processed in parallel; the time axis within
// a chunk is strictly sequential. Every output element is produced by one
// serial loop, so results are thread-count independent in the forward pass.

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>

#include "evtrack/autodiff.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/nd_array.hpp"
#include "evtrack/parallel.hpp"

namespace evtrack::ssm {

inline constexpr double kZohSeriesCutoff = 1e-6;

template <typename T>
struct ZohFactors {
  T abar;  // exp(dt*a)
  T coef;  // integral of exp(a*s) over [0, dt]
};

template <typename T>
ZohFactors<T> zoh_factors(T a, T dt) {
  const T da = dt * a;
  const T abar = std::exp(da);
  T coef;
  if (std::abs(da) > static_cast<T>(kZohSeriesCutoff)) {
    coef = (abar - T{1}) / a;
  } else {
    coef = dt * (T{1} + da / T{2});
  }
  return {abar, coef};
}

// Learned per-direction state-space parameters. `a_diag` holds the diagonal
// continuous-time rates (strictly negative when produced from -exp(a_log));
// `d_skip` is the per-channel input passthrough.
template <typename T>
struct SsmCoeffs {
  NdArray<T> a_diag;  // [C, N]
  NdArray<T> d_skip;  // [C]
};

// Per-call scan tensors. `prompt` may be null (no readout injection).
template <typename T>
struct ScanInputs {
  const NdArray<T>* x;       // [B, L, C]
  const NdArray<T>* b_mat;   // [B, L, N]
  const NdArray<T>* c_mat;   // [B, L, N]
  const NdArray<T>* dt;      // [B, L, C], strictly positive
  const NdArray<T>* prompt;  // [B, L, N] or null
};

template <typename T>
struct ScanDims {
  std::size_t B, L, C, N;
};

template <typename T>
ScanDims<T> validate_scan(const ScanInputs<T>& in, const SsmCoeffs<T>& coef) {
  const auto& xs = in.x->shape();
  if (xs.size() != 3) throw ShapeError("scan: x must be [B,L,C], got " + shape_str(xs));
  const std::size_t B = xs[0], L = xs[1], C = xs[2];
  const auto& as = coef.a_diag.shape();
  if (as.size() != 2 || as[0] != C) {
    throw ShapeError("scan: a_diag " + shape_str(as) + " does not match C=" +
                     std::to_string(C));
  }
  const std::size_t N = as[1];
  require_shape(*in.b_mat, {B, L, N}, "scan b_mat");
  require_shape(*in.c_mat, {B, L, N}, "scan c_mat");
  require_shape(*in.dt, {B, L, C}, "scan dt");
  require_shape(coef.d_skip, {C}, "scan d_skip");
  if (in.prompt) require_shape(*in.prompt, {B, L, N}, "scan prompt");
  for (std::size_t i = 0; i < in.dt->numel(); ++i) {
    if (!((*in.dt)[i] > T{0})) {
      throw ParamError("scan: dt must be positive, got " +
                       std::to_string(static_cast<double>((*in.dt)[i])));
    }
  }
  return {B, L, C, N};
}

// Saved forward quantities for the analytic adjoint: post-update states and
// the discrete transition factors, both [B, L, C, N].
template <typename T>
struct ScanWork {
  NdArray<T> h;
  NdArray<T> abar;
};

// ZOH discretization materialized for inspection: Ā and B̄, each [B,L,C,N].
template <typename T>
std::pair<NdArray<T>, NdArray<T>> discretize_zoh(const NdArray<T>& a_diag,
                                                 const NdArray<T>& b_mat,
                                                 const NdArray<T>& dt) {
  const auto& as = a_diag.shape();
  const auto& bs = b_mat.shape();
  const auto& ds = dt.shape();
  if (as.size() != 2 || bs.size() != 3 || ds.size() != 3 || ds[2] != as[0] ||
      bs[2] != as[1] || bs[0] != ds[0] || bs[1] != ds[1]) {
    throw ShapeError("discretize_zoh: a " + shape_str(as) + ", B " +
                     shape_str(bs) + ", dt " + shape_str(ds));
  }
  const std::size_t B = bs[0], L = bs[1], N = as[1], C = as[0];
  for (std::size_t i = 0; i < dt.numel(); ++i) {
    if (!(dt[i] > T{0})) {
      throw ParamError("discretize_zoh: dt must be positive");
    }
  }
  NdArray<T> abar({B, L, C, N});
  NdArray<T> bbar({B, L, C, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) {
        const T dtv = dt.at(b, l, c);
        for (std::size_t n = 0; n < N; ++n) {
          const auto f = zoh_factors(a_diag.at(c, n), dtv);
          abar.at(b, l, c, n) = f.abar;
          bbar.at(b, l, c, n) = f.coef * b_mat.at(b, l, n);
        }
      }
  return {std::move(abar), std::move(bbar)};
}

namespace detail {

// The scan accumulates at a precision above the storage type (f64 for f32
// tensors, 80-bit extended for f64 tensors), so the single- and multi-chunk
// paths agree to the last stored bit (f32) or well below 1e-12 (f64).
template <typename T>
struct ScanAccOf {
  using type = double;
};
template <>
struct ScanAccOf<double> {
  using type = long double;
};
template <typename T>
using ScanAcc = typename ScanAccOf<T>::type;

// Scans timesteps [l0, l1) for one (b, c) pair starting from state h[N],
// writing y and (optionally) work buffers. h is updated in place.
template <typename T>
void scan_span(const ScanInputs<T>& in, const SsmCoeffs<T>& coef,
               const ScanDims<T>& dims, std::size_t b, std::size_t c,
               std::size_t l0, std::size_t l1, ScanAcc<T>* h, NdArray<T>* y,
               ScanWork<T>* work, ScanAcc<T>* h_trace,
               ScanAcc<T>* abar_trace) {
  using Acc = ScanAcc<T>;
  const std::size_t L = dims.L, C = dims.C, N = dims.N;
  const T* a_row = coef.a_diag.data() + c * N;
  const Acc dval = static_cast<Acc>(coef.d_skip[c]);
  for (std::size_t l = l0; l < l1; ++l) {
    const Acc xv = static_cast<Acc>((*in.x).at(b, l, c));
    const Acc dtv = static_cast<Acc>((*in.dt).at(b, l, c));
    const T* brow = in.b_mat->data() + (b * L + l) * N;
    const T* crow = in.c_mat->data() + (b * L + l) * N;
    const T* prow = in.prompt ? in.prompt->data() + (b * L + l) * N : nullptr;
    T* wh = work ? work->h.data() + ((b * L + l) * C + c) * N : nullptr;
    T* wa = work ? work->abar.data() + ((b * L + l) * C + c) * N : nullptr;
    Acc acc = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const auto f = zoh_factors(static_cast<Acc>(a_row[n]), dtv);
      const Acc hv = f.abar * h[n] + f.coef * static_cast<Acc>(brow[n]) * xv;
      h[n] = hv;
      const Acc cv =
          prow ? static_cast<Acc>(crow[n]) + static_cast<Acc>(prow[n])
               : static_cast<Acc>(crow[n]);
      acc += cv * hv;
      if (wh) wh[n] = static_cast<T>(hv);
      if (wa) wa[n] = static_cast<T>(f.abar);
      if (h_trace) h_trace[l * N + n] = hv;
      if (abar_trace) abar_trace[l * N + n] = f.abar;
    }
    if (y) {
      const Acc yv = acc + dval * xv;
      if (!std::isfinite(static_cast<double>(yv))) {
        throw NumericError("selective_scan: non-finite value at timestep " +
                           std::to_string(l));
      }
      (*y).at(b, l, c) = static_cast<T>(yv);
    }
  }
}

}  // namespace detail

// Strict left-to-right reference recurrence.
template <typename T>
NdArray<T> selective_scan_ref(const ScanInputs<T>& in,
                              const SsmCoeffs<T>& coef,
                              ScanWork<T>* work = nullptr) {
  const ScanDims<T> dims = validate_scan(in, coef);
  NdArray<T> y({dims.B, dims.L, dims.C});
  if (work) {
    work->h = NdArray<T>({dims.B, dims.L, dims.C, dims.N});
    work->abar = NdArray<T>({dims.B, dims.L, dims.C, dims.N});
  }
  parallel_for(dims.B * dims.C, [&](std::size_t i0, std::size_t i1) {
    using Acc = detail::ScanAcc<T>;
    std::vector<Acc> h(dims.N);
    for (std::size_t i = i0; i < i1; ++i) {
      const std::size_t b = i / dims.C, c = i % dims.C;
      std::fill(h.begin(), h.end(), Acc{0});
      detail::scan_span(in, coef, dims, b, c, 0, dims.L, h.data(), &y, work,
                        static_cast<Acc*>(nullptr), static_cast<Acc*>(nullptr));
    }
  }, 1);
  return y;
}

// Same semantics via per-chunk local scans composed through the affine map
// h_out = alpha * h_in + beta, where alpha is the product of abar over the
// chunk and beta the chunk's zero-state response.
template <typename T>
NdArray<T> selective_scan_chunked(const ScanInputs<T>& in,
                                  const SsmCoeffs<T>& coef, std::size_t chunk,
                                  ScanWork<T>* work = nullptr) {
  if (chunk < 1) throw ParamError("selective_scan_chunked: chunk must be >= 1");
  const ScanDims<T> dims = validate_scan(in, coef);
  const std::size_t B = dims.B, L = dims.L, C = dims.C, N = dims.N;
  NdArray<T> y({B, L, C});
  if (work) {
    work->h = NdArray<T>({B, L, C, N});
    work->abar = NdArray<T>({B, L, C, N});
  }
  const std::size_t n_chunks = (L + chunk - 1) / chunk;

  parallel_for(B * C, [&](std::size_t i0, std::size_t i1) {
    using Acc = detail::ScanAcc<T>;
    // Per-(b, c) high-precision traces of the zero-state chunk scans.
    std::vector<Acc> local_h(L * N), local_abar(L * N);
    std::vector<Acc> h(N), hin(N), pref(N);
    for (std::size_t i = i0; i < i1; ++i) {
      const std::size_t b = i / C, c = i % C;
      // Pass 1: zero-state local scan per chunk (independent across chunks).
      for (std::size_t k = 0; k < n_chunks; ++k) {
        const std::size_t l0 = k * chunk;
        const std::size_t l1 = std::min(L, l0 + chunk);
        std::fill(h.begin(), h.end(), Acc{0});
        detail::scan_span(in, coef, dims, b, c, l0, l1, h.data(),
                          static_cast<NdArray<T>*>(nullptr),
                          static_cast<ScanWork<T>*>(nullptr), local_h.data(),
                          local_abar.data());
      }
      // Sequential composition of chunk state maps, then output fix-up.
      std::fill(hin.begin(), hin.end(), Acc{0});
      const Acc dval = static_cast<Acc>(coef.d_skip[c]);
      for (std::size_t k = 0; k < n_chunks; ++k) {
        const std::size_t l0 = k * chunk;
        const std::size_t l1 = std::min(L, l0 + chunk);
        std::fill(pref.begin(), pref.end(), Acc{1});
        for (std::size_t l = l0; l < l1; ++l) {
          const T* crow = in.c_mat->data() + (b * L + l) * N;
          const T* prow =
              in.prompt ? in.prompt->data() + (b * L + l) * N : nullptr;
          const Acc xv = static_cast<Acc>((*in.x).at(b, l, c));
          T* wh = work ? work->h.data() + ((b * L + l) * C + c) * N : nullptr;
          T* wa =
              work ? work->abar.data() + ((b * L + l) * C + c) * N : nullptr;
          Acc acc = 0;
          for (std::size_t n = 0; n < N; ++n) {
            pref[n] *= local_abar[l * N + n];
            const Acc hv = pref[n] * hin[n] + local_h[l * N + n];
            local_h[l * N + n] = hv;  // now the true state
            const Acc cv =
                prow ? static_cast<Acc>(crow[n]) + static_cast<Acc>(prow[n])
                     : static_cast<Acc>(crow[n]);
            acc += cv * hv;
            if (wh) wh[n] = static_cast<T>(hv);
            if (wa) wa[n] = static_cast<T>(local_abar[l * N + n]);
          }
          const Acc yv = acc + dval * xv;
          if (!std::isfinite(static_cast<double>(yv))) {
            throw NumericError(
                "selective_scan: non-finite value at timestep " +
                std::to_string(l));
          }
          y.at(b, l, c) = static_cast<T>(yv);
        }
        // Affine hand-off: alpha = running product at the chunk end, beta =
        // the chunk's final zero-state response, both folded in above.
        const std::size_t last = l1 - 1;
        for (std::size_t n = 0; n < N; ++n) hin[n] = local_h[last * N + n];
      }
    }
  }, 1);
  return y;
}

template <typename T>
struct ScanGrads {
  NdArray<T> dx;      // [B, L, C]
  NdArray<T> db_mat;  // [B, L, N]
  NdArray<T> dc_mat;  // [B, L, N]
  NdArray<T> ddt;     // [B, L, C]
  NdArray<T> dprompt; // [B, L, N]; equals dc_mat elementwise
  NdArray<T> da_diag; // [C, N]
  NdArray<T> dd_skip; // [C]
};

// Right-to-left adjoint of the scan recurrence. `work` must hold the forward
// post-update states and transition factors.
template <typename T>
ScanGrads<T> selective_scan_backward(const ScanInputs<T>& in,
                                     const SsmCoeffs<T>& coef,
                                     const NdArray<T>& dy,
                                     const ScanWork<T>& work) {
  const ScanDims<T> dims = validate_scan(in, coef);
  const std::size_t B = dims.B, L = dims.L, C = dims.C, N = dims.N;
  require_shape(dy, {B, L, C}, "scan dy");
  require_shape(work.h, {B, L, C, N}, "scan work.h");

  ScanGrads<T> g;
  g.dx = NdArray<T>({B, L, C});
  g.db_mat = NdArray<T>({B, L, N});
  g.dc_mat = NdArray<T>({B, L, N});
  g.ddt = NdArray<T>({B, L, C});
  g.da_diag = NdArray<T>({C, N});
  g.dd_skip = NdArray<T>({C});

  std::vector<double> carry(N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      std::fill(carry.begin(), carry.end(), 0.0);
      const T* a_row = coef.a_diag.data() + c * N;
      const double dval = static_cast<double>(coef.d_skip[c]);
      for (std::size_t l = L; l-- > 0;) {
        const double gy = static_cast<double>(dy.at(b, l, c));
        const double xv = static_cast<double>((*in.x).at(b, l, c));
        const double dtv = static_cast<double>((*in.dt).at(b, l, c));
        const T* brow = in.b_mat->data() + (b * L + l) * N;
        const T* crow = in.c_mat->data() + (b * L + l) * N;
        const T* prow =
            in.prompt ? in.prompt->data() + (b * L + l) * N : nullptr;
        const T* h_now = work.h.data() + ((b * L + l) * C + c) * N;
        const T* h_prev =
            l > 0 ? work.h.data() + ((b * L + (l - 1)) * C + c) * N : nullptr;
        const T* arow_bar = work.abar.data() + ((b * L + l) * C + c) * N;
        T* dcrow = g.dc_mat.data() + (b * L + l) * N;
        T* dbrow = g.db_mat.data() + (b * L + l) * N;

        g.dd_skip[c] += static_cast<T>(gy * xv);
        double dx_acc = gy * dval;
        double ddt_acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double hv = static_cast<double>(h_now[n]);
          dcrow[n] += static_cast<T>(gy * hv);
          const double cv =
              prow ? static_cast<double>(crow[n]) +
                         static_cast<double>(prow[n])
                   : static_cast<double>(crow[n]);
          // gradient reaching the state h[l]
          const double gh = gy * cv + carry[n];
          const double hp = h_prev ? static_cast<double>(h_prev[n]) : 0.0;
          const double abar = static_cast<double>(arow_bar[n]);
          const double a = static_cast<double>(a_row[n]);
          const double bv = static_cast<double>(brow[n]);
          const double da_prod = dtv * a;
          // transition factor path: abar = exp(dt*a)
          const double dabar = gh * hp;
          double da_acc = dabar * dtv * abar;
          ddt_acc += dabar * a * abar;
          // input factor path: coef mirrors the forward branch choice
          double coef_v, dcoef_ddt, dcoef_da;
          if (std::abs(da_prod) > kZohSeriesCutoff) {
            coef_v = (abar - 1.0) / a;
            dcoef_ddt = abar;
            dcoef_da = (dtv * abar - coef_v) / a;
          } else {
            coef_v = dtv * (1.0 + da_prod / 2.0);
            dcoef_ddt = 1.0 + da_prod;
            dcoef_da = dtv * dtv / 2.0;
          }
          const double dcoef = gh * bv * xv;
          ddt_acc += dcoef * dcoef_ddt;
          da_acc += dcoef * dcoef_da;
          g.da_diag.at(c, n) += static_cast<T>(da_acc);
          dbrow[n] += static_cast<T>(gh * coef_v * xv);
          dx_acc += gh * coef_v * bv;
          carry[n] = gh * abar;
        }
        g.dx.at(b, l, c) += static_cast<T>(dx_acc);
        g.ddt.at(b, l, c) += static_cast<T>(ddt_acc);
      }
    }
  // The prompt enters additively next to C, so the gradients coincide.
  g.dprompt = g.dc_mat;
  return g;
}

// ---------------------------------------------------------------------------
// Tape-integrated scan

template <typename T>
struct ScanVars {
  Var<T> x, b_mat, c_mat, dt;  // dt already positive (softplus upstream)
  Var<T> a_diag, d_skip;
  Var<T> prompt;  // may be null
};

template <typename T>
Var<T> selective_scan(Tape<T>& tape, const ScanVars<T>& v,
                      std::size_t chunk = 0) {
  ScanInputs<T> in{&v.x->value, &v.b_mat->value, &v.c_mat->value,
                   &v.dt->value, v.prompt ? &v.prompt->value : nullptr};
  SsmCoeffs<T> coef{v.a_diag->value, v.d_skip->value};
  auto work = std::make_shared<ScanWork<T>>();
  NdArray<T> y = chunk == 0
                     ? selective_scan_ref(in, coef, tape.enabled() ? work.get() : nullptr)
                     : selective_scan_chunked(in, coef, chunk,
                                              tape.enabled() ? work.get() : nullptr);
  auto out = make_var(std::move(y));
  if (tape.enabled()) {
    ScanVars<T> vc = v;
    tape.record([vc, out, work] {
      ScanInputs<T> in2{&vc.x->value, &vc.b_mat->value, &vc.c_mat->value,
                        &vc.dt->value,
                        vc.prompt ? &vc.prompt->value : nullptr};
      SsmCoeffs<T> coef2{vc.a_diag->value, vc.d_skip->value};
      ScanGrads<T> gr =
          selective_scan_backward(in2, coef2, out->grad_buffer(), *work);
      if (vc.x->requires_grad) accumulate(vc.x->grad_buffer(), gr.dx);
      if (vc.b_mat->requires_grad) accumulate(vc.b_mat->grad_buffer(), gr.db_mat);
      if (vc.c_mat->requires_grad) accumulate(vc.c_mat->grad_buffer(), gr.dc_mat);
      if (vc.dt->requires_grad) accumulate(vc.dt->grad_buffer(), gr.ddt);
      if (vc.a_diag->requires_grad) accumulate(vc.a_diag->grad_buffer(), gr.da_diag);
      if (vc.d_skip->requires_grad) accumulate(vc.d_skip->grad_buffer(), gr.dd_skip);
      if (vc.prompt && vc.prompt->requires_grad)
        accumulate(vc.prompt->grad_buffer(), gr.dprompt);
    });
  }
  return out;
}

// Reverses [B, L, *] tensors along the token axis (raw helper).
template <typename T>
NdArray<T> reverse_l(const NdArray<T>& a) {
  const auto& s = a.shape();
  if (s.size() != 3) throw ShapeError("reverse_l: need rank 3, got " + shape_str(s));
  NdArray<T> out(s);
  const std::size_t B = s[0], L = s[1], C = s[2];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c)
        out.at(b, L - 1 - l, c) = a.at(b, l, c);
  return out;
}

// Forward and re-reversed backward scans over the same inputs with separate
// parameter sets per direction. The prompt (when present in `in`) is injected
// into both directions.
template <typename T>
std::pair<NdArray<T>, NdArray<T>> bidirectional_scan(
    const ScanInputs<T>& in, const SsmCoeffs<T>& coef_fwd,
    const SsmCoeffs<T>& coef_bwd) {
  NdArray<T> y_f = selective_scan_ref(in, coef_fwd);
  const NdArray<T> x_r = reverse_l(*in.x);
  const NdArray<T> b_r = reverse_l(*in.b_mat);
  const NdArray<T> c_r = reverse_l(*in.c_mat);
  const NdArray<T> dt_r = reverse_l(*in.dt);
  NdArray<T> p_r;
  ScanInputs<T> rin{&x_r, &b_r, &c_r, &dt_r, nullptr};
  if (in.prompt) {
    p_r = reverse_l(*in.prompt);
    rin.prompt = &p_r;
  }
  NdArray<T> y_b = reverse_l(selective_scan_ref(rin, coef_bwd));
  return {std::move(y_f), std::move(y_b)};
}

}  // namespace evtrack::ssm
