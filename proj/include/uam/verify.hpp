#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uam/norm_layers.hpp"

namespace uam::verify {

struct CheckResult {
  std::string name;
  std::string tolerance;
  bool passed = false;
  std::string detail;
};

/// Max scaled error between a Welford state and the two-pass oracle after
/// absorbing `stream`. `skip_index` (when >= 0) drops that one update from
/// the Welford side so tests can confirm the check detects a broken
/// estimator.
double welford_oracle_error(std::span<const double> stream,
                            std::ptrdiff_t skip_index = -1);

/// Max relative error between analytic and central-difference gradients of
/// the batch loss on a 6-4-3 toy network, limits taken over every
/// parameter. Regularity factors are frozen at the operating point.
double gradient_check_error(norm::NormVariant variant, std::uint64_t seed);

/// Max relative error of the softmax cross-entropy logits gradient against
/// central differences.
double softmax_ce_gradient_error(std::uint64_t seed);

/// The invariant and oracle suite: estimator oracle equivalence, COMP
/// monotonicity, code-length nonnegativity, permutation invariance,
/// log-sum-exp extremes, SN-RN reduction, saliency scale invariance,
/// gradient checks for every variant, and the IDX round trip.
std::vector<CheckResult> run_verification_suite();

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace uam::verify
