#pragma once

// The dual-branch bidirectional state-space backbone. One block normalizes
// its input, projects gate and scan paths, mixes tokens with a causal
// depthwise convolution, generates input-dependent scan parameters, runs the
// prompt-injected scan in both directions, gates, projects back and adds the
// residual. The rgb branch consumes the event prompt and vice versa.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evtrack/autodiff.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/ops.hpp"
#include "evtrack/ssm.hpp"

namespace evtrack {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
struct Dense {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // null for bias-free projections

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
    return bias ? ops::linear(tape, x, weight, bias)
                : ops::linear(tape, x, weight);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", bias});
  }
};

// Per-direction learned scan parameters. The projection maps conv features
// to [B | C | dt_raw]; dt = softplus(dt_raw + dt_bias) stays positive, and
// the state rates are -exp(a_log) so they stay negative.
template <typename T>
struct SsmDirection {
  Var<T> a_log;    // [E, N]
  Var<T> d_skip;   // [E]
  Var<T> proj;     // [E, 2N + E]
  Var<T> dt_bias;  // [E]

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".a_log", a_log});
    out.push_back({prefix + ".d_skip", d_skip});
    out.push_back({prefix + ".proj", proj});
    out.push_back({prefix + ".dt_bias", dt_bias});
  }
};

template <typename T>
struct BlockParams {
  Var<T> norm_gamma, norm_beta;  // [C]
  Dense<T> to_gate;              // Linear_z: C -> E
  Dense<T> to_scan;              // Linear_x: C -> E
  Var<T> conv_kernel;            // [E, K], causal depthwise
  SsmDirection<T> fwd, bwd;
  Dense<T> out_proj;             // E -> C, bias-free

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".norm.gamma", norm_gamma});
    out.push_back({prefix + ".norm.beta", norm_beta});
    to_gate.collect(out, prefix + ".to_gate");
    to_scan.collect(out, prefix + ".to_scan");
    out.push_back({prefix + ".conv_kernel", conv_kernel});
    fwd.collect(out, prefix + ".fwd");
    bwd.collect(out, prefix + ".bwd");
    out_proj.collect(out, prefix + ".out_proj");
  }
};

template <typename T>
struct BackboneConfig {
  std::size_t depth = 4;
  std::size_t embed_dim = 96;   // C
  std::size_t state_size = 16;  // N, equals the prompt dimension
  std::size_t expand = 2;       // E = expand * C
  std::size_t conv_width = 4;
  std::size_t scan_chunk = 0;   // 0 = reference scan

  std::size_t inner_dim() const { return expand * embed_dim; }
};

namespace detail {

template <typename T>
struct DirectionOut {
  Var<T> y;
};

// Runs one scan direction: parameter projection, dt activation, prompt
// injection into the readout, and (for the backward direction) reversal
// before and after the scan.
template <typename T>
Var<T> run_direction(Tape<T>& tape, const Var<T>& xc, const Var<T>& prompt,
                     const SsmDirection<T>& dir, std::size_t state_size,
                     std::size_t scan_chunk, bool reversed) {
  const std::size_t N = state_size;
  const std::size_t E = xc->value.dim(2);
  auto pbc = ops::linear(tape, xc, dir.proj);
  auto b_mat = ops::slice_channels(tape, pbc, 0, N);
  auto c_mat = ops::slice_channels(tape, pbc, N, N);
  auto dt_raw = ops::slice_channels(tape, pbc, 2 * N, E);
  auto dt = ops::softplus(tape, ops::add_channel_bias(tape, dt_raw, dir.dt_bias));

  ssm::ScanVars<T> v;
  v.a_diag = ops::neg_exp(tape, dir.a_log);
  v.d_skip = dir.d_skip;
  if (reversed) {
    v.x = ops::reverse_tokens(tape, xc);
    v.b_mat = ops::reverse_tokens(tape, b_mat);
    v.c_mat = ops::reverse_tokens(tape, c_mat);
    v.dt = ops::reverse_tokens(tape, dt);
    v.prompt = prompt ? ops::reverse_tokens(tape, prompt) : nullptr;
    auto y = ssm::selective_scan(tape, v, scan_chunk);
    return ops::reverse_tokens(tape, y);
  }
  v.x = xc;
  v.b_mat = b_mat;
  v.c_mat = c_mat;
  v.dt = dt;
  v.prompt = prompt;
  return ssm::selective_scan(tape, v, scan_chunk);
}

}  // namespace detail

// One block: H_out = H_in + Linear(y_f . SiLU(z) + y_b . SiLU(z)).
// `prompt_other` is the opposite modality's prompt ([B, L, N]) or null.
template <typename T>
Var<T> block_forward(Tape<T>& tape, const Var<T>& h_in,
                     const Var<T>& prompt_other, const BlockParams<T>& params,
                     const BackboneConfig<T>& cfg) {
  if (prompt_other &&
      prompt_other->value.dim(2) != cfg.state_size) {
    throw ConfigError("prompt_dim",
                      "prompt dimension " +
                          std::to_string(prompt_other->value.dim(2)) +
                          " must equal state size " +
                          std::to_string(cfg.state_size));
  }
  auto normed = ops::layer_norm(tape, h_in, params.norm_gamma,
                                params.norm_beta, static_cast<T>(1e-6));
  auto z = params.to_gate.forward(tape, normed);
  auto xp = params.to_scan.forward(tape, normed);
  auto xc = ops::silu(tape, ops::depthwise_conv1d(tape, xp, params.conv_kernel));

  auto y_f = detail::run_direction(tape, xc, prompt_other, params.fwd,
                                   cfg.state_size, cfg.scan_chunk, false);
  auto y_b = detail::run_direction(tape, xc, prompt_other, params.bwd,
                                   cfg.state_size, cfg.scan_chunk, true);

  auto gate = ops::silu(tape, z);
  auto mixed = ops::add(tape, ops::mul(tape, y_f, gate),
                        ops::mul(tape, y_b, gate));
  return ops::add(tape, h_in, params.out_proj.forward(tape, mixed));
}

// The two parameter-independent, architecturally symmetric branch stacks.
template <typename T>
struct Backbone {
  BackboneConfig<T> config;
  std::vector<BlockParams<T>> rgb_blocks;
  std::vector<BlockParams<T>> event_blocks;

  // Cross-modal wiring: every rgb block receives the event prompt, every
  // event block the rgb prompt. Prompts may be null (prompt-free build).
  std::pair<Var<T>, Var<T>> forward(Tape<T>& tape, const Var<T>& h_rgb,
                                    const Var<T>& h_event,
                                    const Var<T>& prompt_rgb,
                                    const Var<T>& prompt_event) const {
    if (rgb_blocks.size() != event_blocks.size() ||
        rgb_blocks.size() != config.depth) {
      throw ConfigError("depth", "block count " +
                                     std::to_string(rgb_blocks.size()) + "/" +
                                     std::to_string(event_blocks.size()) +
                                     " does not match depth " +
                                     std::to_string(config.depth));
    }
    Var<T> f_rgb = h_rgb;
    Var<T> f_event = h_event;
    for (std::size_t l = 0; l < config.depth; ++l) {
      f_rgb = block_forward(tape, f_rgb, prompt_event, rgb_blocks[l], config);
      f_event =
          block_forward(tape, f_event, prompt_rgb, event_blocks[l], config);
    }
    return {f_rgb, f_event};
  }

  void collect(ParamList<T>& out) const {
    for (std::size_t l = 0; l < rgb_blocks.size(); ++l)
      rgb_blocks[l].collect(out, "backbone.rgb." + std::to_string(l));
    for (std::size_t l = 0; l < event_blocks.size(); ++l)
      event_blocks[l].collect(out, "backbone.event." + std::to_string(l));
  }
};

// ---------------------------------------------------------------------------
// initialization

template <typename T>
Var<T> init_normal(std::mt19937_64& rng, Shape shape, T stddev) {
  NdArray<T> a(std::move(shape));
  a.fill_normal(rng, stddev);
  return make_var(std::move(a));
}

// Fan-in scaled: keeps activations near unit variance through the stack.
template <typename T>
Dense<T> init_dense(std::mt19937_64& rng, std::size_t in, std::size_t out,
                    bool with_bias, T stddev = T{0}) {
  if (stddev == T{0}) stddev = T{1} / std::sqrt(static_cast<T>(in));
  Dense<T> d;
  d.weight = init_normal<T>(rng, {in, out}, stddev);
  if (with_bias) d.bias = make_var(NdArray<T>::zeros({out}));
  return d;
}

template <typename T>
SsmDirection<T> init_ssm_direction(std::mt19937_64& rng, std::size_t E,
                                   std::size_t N) {
  SsmDirection<T> dir;
  // Rates initialized to -1..-N per channel, log-parameterized.
  NdArray<T> a_log({E, N});
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t n = 0; n < N; ++n)
      a_log.at(e, n) = std::log(static_cast<T>(n + 1));
  dir.a_log = make_var(std::move(a_log));
  dir.d_skip = make_var(NdArray<T>::ones({E}));
  dir.proj = init_normal<T>(rng, {E, 2 * N + E},
                            T{1} / std::sqrt(static_cast<T>(E)));
  // dt starts log-uniform in [1e-3, 1e-1] through the softplus.
  NdArray<T> dt_bias({E});
  std::uniform_real_distribution<double> logu(std::log(1e-3), std::log(1e-1));
  for (std::size_t e = 0; e < E; ++e) {
    const double dt = std::exp(logu(rng));
    dt_bias[e] = static_cast<T>(std::log(std::expm1(dt)));  // softplus inverse
  }
  dir.dt_bias = make_var(std::move(dt_bias));
  return dir;
}

template <typename T>
BlockParams<T> init_block(std::mt19937_64& rng, const BackboneConfig<T>& cfg) {
  const std::size_t C = cfg.embed_dim, E = cfg.inner_dim();
  BlockParams<T> p;
  p.norm_gamma = make_var(NdArray<T>::ones({C}));
  p.norm_beta = make_var(NdArray<T>::zeros({C}));
  p.to_gate = init_dense<T>(rng, C, E, /*with_bias=*/false);
  p.to_scan = init_dense<T>(rng, C, E, /*with_bias=*/false);
  p.conv_kernel = init_normal<T>(
      rng, {E, cfg.conv_width},
      T{1} / std::sqrt(static_cast<T>(cfg.conv_width)));
  p.fwd = init_ssm_direction<T>(rng, E, cfg.state_size);
  p.bwd = init_ssm_direction<T>(rng, E, cfg.state_size);
  p.out_proj = init_dense<T>(rng, E, C, /*with_bias=*/false);
  return p;
}

template <typename T>
Backbone<T> init_backbone(std::mt19937_64& rng,
                          const BackboneConfig<T>& cfg) {
  Backbone<T> bb;
  bb.config = cfg;
  for (std::size_t l = 0; l < cfg.depth; ++l)
    bb.rgb_blocks.push_back(init_block<T>(rng, cfg));
  for (std::size_t l = 0; l < cfg.depth; ++l)
    bb.event_blocks.push_back(init_block<T>(rng, cfg));
  return bb;
}

}  // namespace evtrack
