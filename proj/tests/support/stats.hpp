#pragma once

// Chi-square survival function via the regularized incomplete gamma
// function, for goodness-of-fit checks on categorical samplers.

#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace evtrack::testing {

namespace detail {

inline double gamma_series_p(double a, double x) {
  double sum = 1.0 / a;
  double term = sum;
  double ap = a;
  for (int i = 0; i < 500; ++i) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_cf_q(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

// Q(a, x) = 1 - P(a, x), the upper regularized incomplete gamma function.
inline double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_q domain");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_series_p(a, x);
  return detail::gamma_cf_q(a, x);
}

// Survival function of the chi-square distribution with `dof` degrees of
// freedom, i.e. the p-value of an observed statistic.
inline double chi_square_sf(double statistic, std::size_t dof) {
  return gamma_q(static_cast<double>(dof) / 2.0, statistic / 2.0);
}

}  // namespace evtrack::testing
