#include "evtrack/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "evtrack/block.hpp"
#include "evtrack/head.hpp"
#include "evtrack/metrics.hpp"
#include "evtrack/prompt.hpp"
#include "evtrack/ssm.hpp"

namespace evtrack {

namespace {

double fd_rel(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// 24-node Gauss-Legendre on [0, dt]; exact to machine precision for the
// smooth exponential integrand at the rates used here.
double integral_exp(double a, double dt) {
  static const double nodes[24] = {
      -0.99518721999702, -0.97472855597131, -0.93827455200273,
      -0.88641552700440, -0.82000198597390, -0.74012419157855,
      -0.64809365193698, -0.54542147138884, -0.43379350762605,
      -0.31504267969616, -0.19111886747362, -0.06405689286261,
      0.06405689286261,  0.19111886747362,  0.31504267969616,
      0.43379350762605,  0.54542147138884,  0.64809365193698,
      0.74012419157855,  0.82000198597390,  0.88641552700440,
      0.93827455200273,  0.97472855597131,  0.99518721999702};
  static const double weights[24] = {
      0.01234122979999, 0.02853138862893, 0.04427743881742, 0.05929858491544,
      0.07334648141108, 0.08619016153195, 0.09761865210411, 0.10744427011597,
      0.11550566805373, 0.12167047292780, 0.12583745634683, 0.12793819534675,
      0.12793819534675, 0.12583745634683, 0.12167047292780, 0.11550566805373,
      0.10744427011597, 0.09761865210411, 0.08619016153195, 0.07334648141108,
      0.05929858491544, 0.04427743881742, 0.02853138862893, 0.01234122979999};
  const double mid = dt / 2.0, half = dt / 2.0;
  double acc = 0;
  for (int i = 0; i < 24; ++i)
    acc += weights[i] * std::exp(a * (mid + half * nodes[i]));
  return acc * half;
}

struct Instance {
  NdArray<double> x, b_mat, c_mat, dt, prompt;
  ssm::SsmCoeffs<double> coef;
  ssm::ScanInputs<double> inputs() const {
    return {&x, &b_mat, &c_mat, &dt, &prompt};
  }
};

Instance make_instance(std::size_t B, std::size_t L, std::size_t C,
                       std::size_t N, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Instance inst;
  inst.x = NdArray<double>({B, L, C});
  inst.x.fill_normal(rng, 1.0);
  inst.b_mat = NdArray<double>({B, L, N});
  inst.b_mat.fill_normal(rng, 1.0);
  inst.c_mat = NdArray<double>({B, L, N});
  inst.c_mat.fill_normal(rng, 1.0);
  inst.dt = NdArray<double>({B, L, C});
  inst.dt.fill_uniform(rng, 0.01, 0.4);
  inst.prompt = NdArray<double>({B, L, N});
  inst.prompt.fill_normal(rng, 0.5);
  inst.coef.a_diag = NdArray<double>({C, N});
  inst.coef.a_diag.fill_uniform(rng, -4.0, -0.05);
  inst.coef.d_skip = NdArray<double>({C});
  inst.coef.d_skip.fill_normal(rng, 1.0);
  return inst;
}

template <typename T>
CheckResult check_scan_equivalence(const char* name, double tolerance) {
  CheckResult r{name, tolerance, 0, false, ""};
  std::uint64_t seed = 1000;
  for (const std::size_t L : {std::size_t{7}, std::size_t{64},
                              std::size_t{257}}) {
    Instance inst64 = make_instance(1, L, 3, 4, seed++);
    // Cast the f64 instance to the working precision.
    NdArray<T> x = inst64.x.cast<T>(), b = inst64.b_mat.cast<T>(),
               c = inst64.c_mat.cast<T>(), dt = inst64.dt.cast<T>(),
               p = inst64.prompt.cast<T>();
    ssm::SsmCoeffs<T> coef{inst64.coef.a_diag.cast<T>(),
                           inst64.coef.d_skip.cast<T>()};
    ssm::ScanInputs<T> in{&x, &b, &c, &dt, &p};
    NdArray<T> ref = ssm::selective_scan_ref(in, coef);
    for (const std::size_t chunk :
         {std::size_t{1}, std::size_t{7}, std::size_t{32}, L}) {
      NdArray<T> y = ssm::selective_scan_chunked(in, coef, chunk);
      r.observed = std::max(r.observed, max_rel_error(y, ref));
    }
  }
  r.pass = r.observed < tolerance;
  return r;
}

CheckResult check_zoh() {
  CheckResult r{"zoh-discretization", 1e-10, 0, false, ""};
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> ua(-8.0, -1e-3);
  std::uniform_real_distribution<double> udt(1e-5, 1.0);
  for (int i = 0; i < 1000; ++i) {
    double a = ua(rng);
    double dt = udt(rng);
    if (i % 5 == 0) {
      std::uniform_real_distribution<double> mag(3.0, 7.5);
      a = -std::pow(10.0, -mag(rng));
      dt = std::pow(10.0, -std::uniform_real_distribution<double>(1.0, 2.0)(rng));
    }
    const auto f = ssm::zoh_factors(a, dt);
    r.observed = std::max(r.observed, fd_rel(f.coef, integral_exp(a, dt)));
  }
  r.pass = r.observed < r.tolerance;
  return r;
}

CheckResult check_scan_gradient(bool flip_sign) {
  CheckResult r{"gradient-scan", 1e-5, 0, false, ""};
  Instance inst = make_instance(1, 8, 3, 4, 77);
  std::mt19937_64 rng(78);
  NdArray<double> weights({1, 8, 3});
  weights.fill_normal(rng, 1.0);

  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(), inst.coef, &work);
  auto grads =
      ssm::selective_scan_backward(inst.inputs(), inst.coef, weights, work);
  const double sign = flip_sign ? -1.0 : 1.0;

  auto scalar = [&] {
    NdArray<double> y = ssm::selective_scan_ref(inst.inputs(), inst.coef);
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += y[i] * weights[i];
    return acc;
  };
  auto compare = [&](NdArray<double>& param, const NdArray<double>& analytic) {
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double saved = param[i];
      param[i] = saved + 1e-5;
      const double up = scalar();
      param[i] = saved - 1e-5;
      const double down = scalar();
      param[i] = saved;
      const double numeric = (up - down) / 2e-5;
      r.observed = std::max(r.observed, fd_rel(sign * analytic[i], numeric));
    }
  };
  compare(inst.x, grads.dx);
  compare(inst.dt, grads.ddt);
  compare(inst.coef.a_diag, grads.da_diag);
  compare(inst.prompt, grads.dprompt);
  r.pass = r.observed < r.tolerance;
  return r;
}

CheckResult check_block_gradient() {
  CheckResult r{"gradient-block", 1e-4, 0, false, ""};
  BackboneConfig<double> cfg;
  cfg.depth = 1;
  cfg.embed_dim = 8;
  cfg.state_size = 4;
  std::mt19937_64 rng(91);
  auto block = init_block<double>(rng, cfg);
  std::uniform_real_distribution<double> dts(0.1, 0.5);
  for (auto* dir : {&block.fwd, &block.bwd})
    for (std::size_t e = 0; e < cfg.inner_dim(); ++e)
      dir->dt_bias->value[e] = std::log(std::expm1(dts(rng)));

  NdArray<double> h({1, 12, 8});
  h.fill_normal(rng, 1.0);
  auto hv = make_var(h);
  NdArray<double> p({1, 12, 4});
  p.fill_normal(rng, 0.5);
  auto pv = make_var(p);
  NdArray<double> weights({1, 12, 8});
  weights.fill_normal(rng, 1.0);

  auto scalar = [&] {
    Tape<double> t(false);
    auto out = block_forward(t, hv, pv, block, cfg);
    double acc = 0;
    for (std::size_t i = 0; i < out->value.numel(); ++i)
      acc += out->value[i] * weights[i];
    return acc;
  };
  Tape<double> tape;
  auto out = block_forward(tape, hv, pv, block, cfg);
  tape.backward(out, weights);

  ParamList<double> params;
  block.collect(params, "block");
  params.push_back({"prompt", pv});
  for (auto& [name, var] : params) {
    for (std::size_t i = 0; i < var->value.numel(); ++i) {
      const double saved = var->value[i];
      var->value[i] = saved + 1e-5;
      const double up = scalar();
      var->value[i] = saved - 1e-5;
      const double down = scalar();
      var->value[i] = saved;
      const double numeric = (up - down) / 2e-5;
      const double analytic = var->grad.numel() ? var->grad[i] : 0.0;
      const double err = fd_rel(analytic, numeric);
      if (err > r.observed) {
        r.observed = err;
        r.detail = name;
      }
    }
  }
  r.pass = r.observed < r.tolerance;
  return r;
}

CheckResult check_prompt_one_hot() {
  CheckResult r{"prompt-one-hot", 0.0, 0, false, ""};
  Tape<double> tape(false);
  std::mt19937_64 rng(101);
  PromptGenerator<double> gen;
  gen.tau = 1.0;
  gen.pool.w_rgb = init_normal<double>(rng, {6, 4}, 0.5);
  gen.pool.w_event = init_normal<double>(rng, {6, 4}, 0.5);
  gen.net.w1 = init_normal<double>(rng, {8, 8}, 0.4);
  gen.net.b1 = make_var(NdArray<double>::zeros({8}));
  gen.net.w2 = init_normal<double>(rng, {8, 6}, 0.4);
  gen.net.b2 = make_var(NdArray<double>::zeros({6}));

  NdArray<double> tokens({1, 9, 8});
  tokens.fill_normal(rng, 1.0);
  auto logp = gen.net.forward(tape, make_var(tokens));
  auto one_hot = gumbel_select(tape, logp, 1.0, SelectMode::kHard, 17);
  for (std::size_t row = 0; row < 9; ++row) {
    double sum = 0, ones = 0;
    for (std::size_t t = 0; t < 6; ++t) {
      const double v = one_hot->value.at(0, row, t);
      if (v != 0.0 && v != 1.0) r.observed = 1;
      sum += v;
      ones += v == 1.0 ? 1 : 0;
    }
    if (sum != 1.0 || ones != 1.0) r.observed = 1;
  }
  // Selected prompts must be verbatim pool rows.
  auto pool = build_pool(tape, gen.pool);
  auto prompts = ops::linear(tape, one_hot, pool);
  for (std::size_t row = 0; row < 9; ++row) {
    bool found = false;
    for (std::size_t t = 0; t < 6 && !found; ++t) {
      bool all = true;
      for (std::size_t d = 0; d < 4; ++d)
        if (prompts->value.at(0, row, d) != pool->value.at(t, d)) all = false;
      found = all;
    }
    if (!found) r.observed = 1;
  }
  r.pass = r.observed == 0.0;
  return r;
}

CheckResult check_giou() {
  CheckResult r{"giou-oracle", 1e-12, 0, false, ""};
  // Identical boxes.
  r.observed = std::max(
      r.observed, std::abs(giou(NormBox{0.5, 0.5, 0.2, 0.2},
                                NormBox{0.5, 0.5, 0.2, 0.2}) - 1.0));
  // Overlap worked out by hand: I=0.08, U=0.24, hull=0.24.
  const double want = 0.08 / 0.24;
  r.observed = std::max(
      r.observed, std::abs(giou(NormBox{0.5, 0.5, 0.4, 0.4},
                                NormBox{0.7, 0.5, 0.4, 0.4}) - want));
  // Distant disjoint unit boxes: IoU 0, hull penalty -> -1.
  const double far = giou(NormBox{0.0, 0.0, 1.0, 1.0},
                          NormBox{1000.0, 0.0, 1.0, 1.0});
  r.observed = std::max(r.observed, std::abs(far - (-0.998001998001998)));
  r.pass = r.observed < r.tolerance;
  return r;
}

CheckResult check_metrics() {
  CheckResult r{"metric-oracle", 1e-12, 0, false, ""};
  // Three hand-constructed frames: exact PR/NPR/SR values.
  std::vector<RectF> gt = {{0, 0, 100, 100}, {50, 50, 100, 100},
                           {0, 0, 50, 50}};
  std::vector<RectF> pred = {{0, 0, 100, 100},   // perfect
                             {75, 50, 100, 100}, // 25 px off, IoU 0.6
                             {25, 0, 50, 50}};   // 25 px off, IoU 1/3
  const auto m = evaluate_tracking(pred, gt);
  // Center errors: 0, 25, 25 px; normalized: 0, 0.25, 0.5.
  r.observed = std::max(r.observed, std::abs(m.pr - 1.0 / 3.0));
  r.observed = std::max(r.observed, std::abs(m.npr - 1.0 / 3.0));
  r.observed = std::max(r.observed, std::abs(m.sr_at_05 - 2.0 / 3.0));
  // Success curve: IoUs are 1, 0.6, 1/3.
  double auc = 0;
  for (int k = 0; k <= 20; ++k) {
    const double thr = 0.05 * k;
    double hits = 0;
    if (1.0 > thr) hits += 1;
    if (0.6 > thr) hits += 1;
    if (1.0 / 3.0 > thr) hits += 1;
    auc += hits / 3.0;
  }
  auc /= 21.0;
  r.observed = std::max(r.observed, std::abs(m.sr_auc - auc));
  r.pass = r.observed < r.tolerance;
  return r;
}

}  // namespace

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options) {
  std::vector<CheckResult> results;
  results.push_back(check_scan_equivalence<double>("scan-equivalence-f64", 1e-12));
  results.push_back(check_scan_equivalence<float>("scan-equivalence-f32", 1e-5));
  results.push_back(check_zoh());
  results.push_back(check_scan_gradient(options.flip_gradient_sign));
  results.push_back(check_block_gradient());
  results.push_back(check_prompt_one_hot());
  results.push_back(check_giou());
  results.push_back(check_metrics());
  return results;
}

std::string selfcheck_report(const std::vector<CheckResult>& results) {
  std::string out;
  char line[256];
  for (const auto& r : results) {
    std::snprintf(line, sizeof(line), "[%s] %-20s tol=%-9.3g observed=%.3g%s%s\n",
                  r.pass ? "PASS" : "FAIL", r.name.c_str(), r.tolerance,
                  r.observed, r.detail.empty() ? "" : "  ",
                  r.detail.c_str());
    out += line;
  }
  return out;
}

bool selfcheck_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace evtrack
