#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "subflow/env.hpp"
#include "subflow/oracle.hpp"

namespace subflow {

struct CheckResult {
  std::string name;
  double value = 0.0;  // worst residual or error found
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  int random_policies = 5;
  std::uint64_t cap = kDefaultEnumerationCap;
  /// Adds `perturbation` to V at this state before the balance check.
  std::optional<int> perturb_state;
  double perturbation = 0.1;
};

/// Worst |a - b| / max(1, |a|) over two tables.
double table_error(std::span<const double> a, std::span<const double> b);

/// Random pi_F and pi_B tables for policy `r` of a suite.
PolicyTables random_tables(const StateGraph& g, std::uint64_t seed, int r);

/// DP tables against brute-force enumeration: F*, Z*, P_F(x), V+ and W+.
CheckResult check_oracle(const StateGraph& g, const VerifyOptions& opt);
/// V := V+ zeroes every forward pair expectation.
CheckResult check_subeb_forward(const Environment& env, const StateGraph& g, const VerifyOptions& opt);
/// Pointwise Sub-TB at (F*, pi_F*) and expectations of log F* - KL for random pi_F.
CheckResult check_subtb(const StateGraph& g, const VerifyOptions& opt);
/// W := W+ zeroes interior backward expectations; W+ = log F - prefix KL;
/// terminal spans vanish at (pi_F*, Z*).
CheckResult check_subeb_backward(const StateGraph& g, const VerifyOptions& opt);

std::vector<CheckResult> verify_all(const Environment& env, const VerifyOptions& opt);

std::string describe_pair(const Environment& env, const StateGraph& g, int state, int span);

}  // namespace subflow
