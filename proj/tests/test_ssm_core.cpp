#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "evtrack/ssm.hpp"
#include "support/finite_diff.hpp"
#include "support/quadrature.hpp"

using namespace evtrack;
namespace td = evtrack::testing;

namespace {

struct Instance {
  NdArray<double> x, b_mat, c_mat, dt, prompt;
  ssm::SsmCoeffs<double> coef;

  ssm::ScanInputs<double> inputs(bool with_prompt = true) const {
    return {&x, &b_mat, &c_mat, &dt, with_prompt ? &prompt : nullptr};
  }
};

Instance random_instance(std::size_t B, std::size_t L, std::size_t C,
                         std::size_t N, std::uint64_t seed,
                         bool zero_prompt = false) {
  std::mt19937_64 rng(seed);
  Instance inst;
  inst.x = NdArray<double>({B, L, C});
  inst.x.fill_normal(rng, 1.0);
  inst.b_mat = NdArray<double>({B, L, N});
  inst.b_mat.fill_normal(rng, 1.0);
  inst.c_mat = NdArray<double>({B, L, N});
  inst.c_mat.fill_normal(rng, 1.0);
  inst.dt = NdArray<double>({B, L, C});
  inst.dt.fill_uniform(rng, 0.001, 0.4);
  inst.prompt = NdArray<double>({B, L, N});
  if (!zero_prompt) inst.prompt.fill_normal(rng, 0.5);
  inst.coef.a_diag = NdArray<double>({C, N});
  inst.coef.a_diag.fill_uniform(rng, -4.0, -0.05);
  inst.coef.d_skip = NdArray<double>({C});
  inst.coef.d_skip.fill_normal(rng, 1.0);
  return inst;
}

// Brute-force recurrence written independently of the library kernels.
NdArray<double> unrolled_oracle(const Instance& inst, bool with_prompt) {
  const auto B = inst.x.dim(0), L = inst.x.dim(1), C = inst.x.dim(2);
  const auto N = inst.coef.a_diag.dim(1);
  NdArray<double> y({B, L, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> h(N, 0.0);
      for (std::size_t l = 0; l < L; ++l) {
        double acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const double a = inst.coef.a_diag.at(c, n);
          const double dt = inst.dt.at(b, l, c);
          const double abar = std::exp(dt * a);
          const double coefv = std::abs(dt * a) > 1e-6
                                   ? (abar - 1.0) / a
                                   : dt * (1.0 + dt * a / 2.0);
          h[n] = abar * h[n] +
                 coefv * inst.b_mat.at(b, l, n) * inst.x.at(b, l, c);
          double cv = inst.c_mat.at(b, l, n);
          if (with_prompt) cv += inst.prompt.at(b, l, n);
          acc += cv * h[n];
        }
        y.at(b, l, c) = acc + inst.coef.d_skip[c] * inst.x.at(b, l, c);
      }
    }
  return y;
}

}  // namespace

TEST_CASE("zoh scalar cases") {
  // a = -1, dt = ln 2 halves the state.
  const auto f = ssm::zoh_factors(-1.0, std::log(2.0));
  CHECK(f.abar == doctest::Approx(0.5).epsilon(1e-12));

  // dt -> 0: abar -> 1, input factor -> 0.
  const auto g = ssm::zoh_factors(-2.0, 1e-12);
  CHECK(g.abar == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(g.coef) < 1e-11);
}

TEST_CASE("zoh input factor matches quadrature oracle") {
  std::mt19937_64 rng(401);
  std::uniform_real_distribution<double> ua(-8.0, -1e-3);
  std::uniform_real_distribution<double> udt(1e-5, 1.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    double a = ua(rng);
    double dt = udt(rng);
    if (i % 5 == 0) {
      // Force near-singular |dt*a| down to ~1e-9.
      a = -std::pow(10.0,
                    -std::uniform_real_distribution<double>(3.0, 7.0)(rng));
      dt = std::pow(10.0,
                    -std::uniform_real_distribution<double>(1.0, 2.0)(rng));
    }
    const auto f = ssm::zoh_factors(a, dt);
    const double want = td::zoh_integral_oracle(a, dt);
    worst = std::max(worst, td::fd_rel_err(f.coef, want));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("discretize_zoh validates dt") {
  NdArray<double> a({1, 2}, {-1.0, -2.0});
  NdArray<double> b({1, 1, 2}, {1.0, 1.0});
  NdArray<double> dt({1, 1, 1}, {0.0});
  CHECK_THROWS_AS(ssm::discretize_zoh(a, b, dt), ParamError);
}

TEST_CASE("discretize_zoh shapes and values") {
  auto inst = random_instance(1, 3, 2, 4, 77);
  auto [abar, bbar] =
      ssm::discretize_zoh(inst.coef.a_diag, inst.b_mat, inst.dt);
  CHECK(abar.shape() == Shape({1, 3, 2, 4}));
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t n = 0; n < 4; ++n) {
        const auto f =
            ssm::zoh_factors(inst.coef.a_diag.at(c, n), inst.dt.at(0, l, c));
        CHECK(abar.at(0, l, c, n) == f.abar);
        CHECK(bbar.at(0, l, c, n) == f.coef * inst.b_mat.at(0, l, n));
      }
}

TEST_CASE("scan of zero input is zero") {
  auto inst = random_instance(1, 5, 3, 4, 5);
  inst.x = NdArray<double>::zeros({1, 5, 3});
  inst.coef.d_skip = NdArray<double>::zeros({3});
  auto y = ssm::selective_scan_ref(inst.inputs(), inst.coef);
  CHECK(max_abs(y) == 0.0);
}

TEST_CASE("zero prompt equals prompt-free scan") {
  auto inst = random_instance(2, 6, 3, 4, 9, /*zero_prompt=*/true);
  auto y_with = ssm::selective_scan_ref(inst.inputs(true), inst.coef);
  auto y_without = ssm::selective_scan_ref(inst.inputs(false), inst.coef);
  for (std::size_t i = 0; i < y_with.numel(); ++i)
    CHECK(y_with[i] == y_without[i]);
}

TEST_CASE("scan matches hand-unrolled recurrence") {
  auto inst = random_instance(1, 3, 1, 2, 21);
  auto y = ssm::selective_scan_ref(inst.inputs(), inst.coef);
  auto want = unrolled_oracle(inst, true);
  CHECK(max_rel_error(y, want) < 1e-14);

  auto inst2 = random_instance(2, 7, 3, 4, 22);
  auto y2 = ssm::selective_scan_ref(inst2.inputs(), inst2.coef);
  auto want2 = unrolled_oracle(inst2, true);
  CHECK(max_rel_error(y2, want2) < 1e-13);
}

TEST_CASE("chunked scan equals reference") {
  auto inst = random_instance(1, 257, 3, 4, 33);
  auto ref = ssm::selective_scan_ref(inst.inputs(), inst.coef);

  SUBCASE("chunk covering everything is exact") {
    auto y = ssm::selective_scan_chunked(inst.inputs(), inst.coef, 257);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ref[i]);
  }
  SUBCASE("chunk of one is exact") {
    auto y = ssm::selective_scan_chunked(inst.inputs(), inst.coef, 1);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ref[i]);
  }
  SUBCASE("interior chunk sizes match within 1e-12") {
    for (const std::size_t chunk : {std::size_t{7}, std::size_t{32},
                                    std::size_t{100}}) {
      auto y = ssm::selective_scan_chunked(inst.inputs(), inst.coef, chunk);
      CHECK(max_rel_error(y, ref) < 1e-12);
    }
  }
  SUBCASE("chunk of zero is rejected") {
    CHECK_THROWS_AS(ssm::selective_scan_chunked(inst.inputs(), inst.coef, 0),
                    ParamError);
  }
}

TEST_CASE("backward of zero seed is zero") {
  auto inst = random_instance(1, 5, 2, 3, 41);
  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(), inst.coef, &work);
  NdArray<double> dy = NdArray<double>::zeros({1, 5, 2});
  auto g = ssm::selective_scan_backward(inst.inputs(), inst.coef, dy, work);
  CHECK(max_abs(g.dx) == 0.0);
  CHECK(max_abs(g.da_diag) == 0.0);
  CHECK(max_abs(g.ddt) == 0.0);
}

TEST_CASE("prompt gradient equals c_mat gradient exactly") {
  auto inst = random_instance(2, 6, 3, 4, 43);
  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(), inst.coef, &work);
  NdArray<double> dy({2, 6, 3});
  std::mt19937_64 rng(44);
  dy.fill_normal(rng, 1.0);
  auto g = ssm::selective_scan_backward(inst.inputs(), inst.coef, dy, work);
  for (std::size_t i = 0; i < g.dc_mat.numel(); ++i)
    CHECK(g.dprompt[i] == g.dc_mat[i]);
}

TEST_CASE("all seven scan gradients match finite differences") {
  const std::size_t B = 1, L = 8, C = 3, N = 4;
  auto inst = random_instance(B, L, C, N, 47);
  std::mt19937_64 rng(48);
  NdArray<double> weights({B, L, C});
  weights.fill_normal(rng, 1.0);

  auto scalar = [&] {
    auto y = ssm::selective_scan_ref(inst.inputs(), inst.coef);
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += y[i] * weights[i];
    return acc;
  };

  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(), inst.coef, &work);
  auto g =
      ssm::selective_scan_backward(inst.inputs(), inst.coef, weights, work);

  auto check = [&](NdArray<double>& param, const NdArray<double>& analytic) {
    NdArray<double> numeric = td::numeric_grad(param, scalar);
    double worst = 0;
    for (std::size_t i = 0; i < numeric.numel(); ++i)
      worst = std::max(worst, td::fd_rel_err(analytic[i], numeric[i]));
    return worst;
  };

  CHECK(check(inst.x, g.dx) < 1e-5);
  CHECK(check(inst.b_mat, g.db_mat) < 1e-5);
  CHECK(check(inst.c_mat, g.dc_mat) < 1e-5);
  CHECK(check(inst.dt, g.ddt) < 1e-5);
  CHECK(check(inst.prompt, g.dprompt) < 1e-5);
  CHECK(check(inst.coef.a_diag, g.da_diag) < 1e-5);
  CHECK(check(inst.coef.d_skip, g.dd_skip) < 1e-5);
}

TEST_CASE("tape-integrated scan backpropagates") {
  auto inst = random_instance(1, 6, 2, 3, 53);
  ssm::ScanVars<double> v;
  v.x = make_var(inst.x);
  v.b_mat = make_var(inst.b_mat);
  v.c_mat = make_var(inst.c_mat);
  v.dt = make_var(inst.dt);
  v.a_diag = make_var(inst.coef.a_diag);
  v.d_skip = make_var(inst.coef.d_skip);
  v.prompt = make_var(inst.prompt);

  Tape<double> tape;
  auto y = ssm::selective_scan(tape, v);
  NdArray<double> seed = NdArray<double>::ones(y->value.shape());
  tape.backward(y, seed);
  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(), inst.coef, &work);
  auto g = ssm::selective_scan_backward(inst.inputs(), inst.coef, seed, work);
  CHECK(max_rel_error(v.x->grad, g.dx) == 0.0);
  CHECK(max_rel_error(v.prompt->grad, g.dprompt) == 0.0);
}

TEST_CASE("bidirectional scan") {
  SUBCASE("palindromic input gives reversed outputs") {
    auto inst = random_instance(1, 7, 2, 3, 61, /*zero_prompt=*/true);
    // Mirror the first half of every [B,L,*] tensor onto the second.
    auto mirror = [](NdArray<double>& a) {
      const auto L = a.dim(1);
      for (std::size_t l = 0; l < L / 2; ++l)
        for (std::size_t c = 0; c < a.dim(2); ++c)
          a.at(0, L - 1 - l, c) = a.at(0, l, c);
    };
    mirror(inst.x);
    mirror(inst.b_mat);
    mirror(inst.c_mat);
    mirror(inst.dt);
    auto [y_f, y_b] =
        ssm::bidirectional_scan(inst.inputs(false), inst.coef, inst.coef);
    const auto rev = ssm::reverse_l(y_f);
    CHECK(max_rel_error(y_b, rev) < 1e-13);
  }
  SUBCASE("single step with shared params is direction independent") {
    auto inst = random_instance(1, 1, 2, 3, 62, /*zero_prompt=*/true);
    auto [y_f, y_b] =
        ssm::bidirectional_scan(inst.inputs(false), inst.coef, inst.coef);
    for (std::size_t i = 0; i < y_f.numel(); ++i) CHECK(y_f[i] == y_b[i]);
  }
  SUBCASE("backward direction matches explicit reversal oracle") {
    auto inst = random_instance(2, 9, 3, 4, 63);
    auto other = random_instance(2, 9, 3, 4, 64).coef;
    auto [y_f, y_b] =
        ssm::bidirectional_scan(inst.inputs(), inst.coef, other);

    Instance rev = inst;
    rev.x = ssm::reverse_l(inst.x);
    rev.b_mat = ssm::reverse_l(inst.b_mat);
    rev.c_mat = ssm::reverse_l(inst.c_mat);
    rev.dt = ssm::reverse_l(inst.dt);
    rev.prompt = ssm::reverse_l(inst.prompt);
    auto want = ssm::reverse_l(ssm::selective_scan_ref(rev.inputs(), other));
    CHECK(max_rel_error(y_b, want) == 0.0);
  }
}

TEST_CASE("prompt injection is linear in the readout") {
  auto inst = random_instance(1, 12, 2, 3, 71);
  auto y_cp = ssm::selective_scan_ref(inst.inputs(true), inst.coef);
  auto y_c = ssm::selective_scan_ref(inst.inputs(false), inst.coef);

  // Same trajectory, readout C := P, D := 0.
  Instance probe = inst;
  probe.c_mat = inst.prompt;
  probe.coef.d_skip = NdArray<double>::zeros({2});
  auto y_p = ssm::selective_scan_ref(probe.inputs(false), probe.coef);

  for (std::size_t i = 0; i < y_cp.numel(); ++i)
    CHECK(std::abs((y_cp[i] - y_c[i]) - y_p[i]) < 1e-12);
}

TEST_CASE("long scans stay bounded with negative rates") {
  const std::size_t L = 10000;
  auto inst = random_instance(1, L, 1, 2, 81, /*zero_prompt=*/true);
  // Constant dt so the contraction bound applies directly.
  for (std::size_t i = 0; i < inst.dt.numel(); ++i) inst.dt[i] = 0.05;
  ssm::ScanWork<double> work;
  ssm::selective_scan_ref(inst.inputs(false), inst.coef, &work);

  double max_abar = 0, max_drive = 0, max_h = 0;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t n = 0; n < 2; ++n) {
      const auto f = ssm::zoh_factors(inst.coef.a_diag.at(0, n), 0.05);
      max_abar = std::max(max_abar, f.abar);
      max_drive = std::max(max_drive, std::abs(f.coef * inst.b_mat.at(0, l, n) *
                                               inst.x.at(0, l, 0)));
      max_h = std::max(max_h, std::abs(work.h.at(0, l, 0, n)));
    }
  CHECK(max_h <= max_drive / (1.0 - max_abar) + 1e-9);
  CHECK(std::isfinite(max_h));
}

TEST_CASE("non-finite intermediate names the timestep") {
  auto inst = random_instance(1, 6, 2, 3, 91, /*zero_prompt=*/true);
  inst.x.at(0, 4, 1) = std::numeric_limits<double>::infinity();
  try {
    ssm::selective_scan_ref(inst.inputs(false), inst.coef);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("4") != std::string::npos);
  }
}

TEST_CASE("scan rejects non-positive dt") {
  auto inst = random_instance(1, 3, 2, 2, 95);
  inst.dt.at(0, 1, 0) = 0.0;
  CHECK_THROWS_AS(ssm::selective_scan_ref(inst.inputs(), inst.coef), ParamError);
}
