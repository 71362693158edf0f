#pragma once

// Prompt pool, shared routing network, and differentiable hard selection.
// Per-token prompts are rows of the pool chosen by Gumbel-softmax routing;
// hard mode emits exact one-hot rows and backpropagates the gradient of the
// soft relaxation (straight-through).

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

#include "evtrack/autodiff.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/ops.hpp"

namespace evtrack {

// Basis prompts: the pool is the elementwise product of the two modality
// embedding matrices.
template <typename T>
struct PromptPool {
  Var<T> w_rgb;    // [T_pool, d]
  Var<T> w_event;  // [T_pool, d]

  std::size_t pool_size() const { return w_rgb->value.dim(0); }
  std::size_t prompt_dim() const { return w_rgb->value.dim(1); }
};

template <typename T>
Var<T> build_pool(Tape<T>& tape, const PromptPool<T>& pool) {
  if (!pool.w_rgb->value.same_shape(pool.w_event->value)) {
    throw ShapeError("build_pool: " + shape_str(pool.w_rgb->value.shape()) +
                     " vs " + shape_str(pool.w_event->value.shape()));
  }
  return ops::mul(tape, pool.w_rgb, pool.w_event);
}

// Shared two-layer routing perceptron ending in LogSoftmax. Rows of the
// output are valid log-probabilities (logsumexp == 0).
template <typename T>
struct RoutingNet {
  Var<T> w1, b1;  // [C, hidden], [hidden]
  Var<T> w2, b2;  // [hidden, T_pool], [T_pool]

  Var<T> forward(Tape<T>& tape, const Var<T>& tokens) const {
    auto h = ops::silu(tape, ops::linear(tape, tokens, w1, b1));
    return ops::log_softmax(tape, ops::linear(tape, h, w2, b2));
  }
};

enum class SelectMode {
  kHard,    // one-hot rows, straight-through gradient
  kSoft,    // relaxed simplex rows
  kArgmax,  // deterministic one-hot, no noise (inference)
};

// Routing selection over the trailing axis of [B, L, T] log-probabilities.
// Deterministic given the seed; tau must be positive.
template <typename T>
Var<T> gumbel_select(Tape<T>& tape, const Var<T>& logp, T tau,
                     SelectMode mode, std::uint64_t seed = 0) {
  if (!(tau > T{0})) {
    throw ParamError("gumbel_select: tau must be positive, got " +
                     std::to_string(static_cast<double>(tau)));
  }
  const auto& s = logp->value.shape();
  const std::size_t D = s.back();
  const std::size_t rows = logp->value.numel() / D;

  NdArray<T> z(s);
  if (mode == SelectMode::kArgmax) {
    for (std::size_t i = 0; i < z.numel(); ++i)
      z[i] = logp->value[i] / tau;
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(1e-12, 1.0);
    for (std::size_t i = 0; i < z.numel(); ++i) {
      const double g = -std::log(-std::log(unif(rng)));
      z[i] = (logp->value[i] + static_cast<T>(g)) / tau;
    }
  }
  auto soft = std::make_shared<NdArray<T>>(s);
  ops::detail::softmax_rows(z, *soft);

  NdArray<T> value(s);
  if (mode == SelectMode::kSoft) {
    value = *soft;
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* sr = soft->data() + r * D;
      std::size_t best = 0;
      for (std::size_t d = 1; d < D; ++d)
        if (sr[d] > sr[best]) best = d;
      value[r * D + best] = T{1};
    }
  }
  auto out = make_var(std::move(value));
  if (tape.enabled() && logp->requires_grad) {
    Var<T> lp = logp;
    const T inv_tau = T{1} / tau;
    tape.record([lp, out, soft, rows, D, inv_tau] {
      // Gradient of the soft relaxation at the same sample, all modes.
      const NdArray<T>& dy = out->grad_buffer();
      NdArray<T>& dx = lp->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* sr = soft->data() + r * D;
        const T* dyr = dy.data() + r * D;
        T dot = 0;
        for (std::size_t d = 0; d < D; ++d) dot += dyr[d] * sr[d];
        T* dxr = dx.data() + r * D;
        for (std::size_t d = 0; d < D; ++d)
          dxr[d] += inv_tau * sr[d] * (dyr[d] - dot);
      }
    });
  }
  return out;
}

template <typename T>
struct GeneratedPrompts {
  Var<T> rgb;    // P_r: [B, L, d]
  Var<T> event;  // P_e: [B, L, d]
};

template <typename T>
struct PromptGenerator {
  PromptPool<T> pool;
  RoutingNet<T> net;
  T tau = T{1};

  // Routes both token streams through the shared net, selects per-token
  // basis prompts, and multiplies the selection matrices with the pool.
  // Both modalities draw with the same seed, so identical inputs produce
  // identical prompts.
  GeneratedPrompts<T> generate(Tape<T>& tape, const Var<T>& h_rgb,
                               const Var<T>& h_event, SelectMode mode,
                               std::uint64_t seed = 0) const {
    if (h_rgb->value.dim(1) != h_event->value.dim(1)) {
      throw ShapeError("generate_prompts: token length mismatch " +
                       shape_str(h_rgb->value.shape()) + " vs " +
                       shape_str(h_event->value.shape()));
    }
    auto pool_values = build_pool(tape, pool);
    auto logp_r = net.forward(tape, h_rgb);
    auto logp_e = net.forward(tape, h_event);
    auto one_hot_r = gumbel_select(tape, logp_r, tau, mode, seed);
    auto one_hot_e = gumbel_select(tape, logp_e, tau, mode, seed);
    GeneratedPrompts<T> out;
    out.rgb = ops::linear(tape, one_hot_r, pool_values);
    out.event = ops::linear(tape, one_hot_e, pool_values);
    return out;
  }
};

}  // namespace evtrack
