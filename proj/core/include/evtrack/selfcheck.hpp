#pragma once

// Built-in verification: re-runs the numerical oracles (scan equivalence,
// discretization quadrature, gradient checks, prompt selection, overlap
// arithmetic, tracking metrics) and reports per-check tolerances and
// observed errors.

#include <string>
#include <vector>

namespace evtrack {

struct CheckResult {
  std::string name;
  double tolerance = 0;
  double observed = 0;
  bool pass = false;
  std::string detail;
};

struct SelfCheckOptions {
  // Test fixture: flips the sign of the analytic gradient inside the scan
  // gradient check, which must make exactly that check fail.
  bool flip_gradient_sign = false;
};

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options = {});

std::string selfcheck_report(const std::vector<CheckResult>& results);
bool selfcheck_passed(const std::vector<CheckResult>& results);

}  // namespace evtrack
