#pragma once

#include <string>
#include <vector>

#include "instalign/common.hpp"

namespace instalign {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Gradient-fidelity and metric-oracle suites: finite-difference checks of
/// every trainable network, the closed-form Jacobian-loss values, the
/// identity-start bound, and brute-force oracles for every metric. The
/// oracles are reimplemented here from scratch, independent of the library
/// code paths they validate.
std::vector<CheckResult> run_selfchecks();

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace instalign
