#pragma once

#include <span>
#include <vector>

#include "subflow/objectives.hpp"
#include "subflow/policy.hpp"
#include "subflow/sampler.hpp"

namespace subflow {

inline constexpr double kStalenessTolerance = 1e-9;

/// TD terms R(s_h -> s_{h+1}) + V(s_{h+1}) - V(s_h), one per edge. The
/// terminal edge uses log pi~_B(x|s_f) = `terminal_log_mass` and V(s_f) = 0.
std::vector<double> td_forward(const Trajectory& t, std::span<const double> value,
                               double terminal_log_mass);
/// A^gamma(s_h -> s_{h+1}) for every h.
std::vector<double> advantages_forward(std::span<const double> td, double gamma);
double advantage_forward(const Trajectory& t, int h, std::span<const double> value, double gamma,
                         double terminal_log_mass);

/// R(s_h <- s_{h+1}) + W(s_h) - W(s_{h+1}) over the non-terminal edges.
std::vector<double> td_backward(const Trajectory& t, std::span<const double> w);
/// A^gamma(s_h <- s_{h+1}) = sum_{i<=h} gamma^(h-i) td_i.
std::vector<double> advantages_backward(std::span<const double> td, double gamma);
double advantage_backward(const Trajectory& t, int h, std::span<const double> w, double gamma);

struct GradEstimate {
  /// Ascent directions: estimates of grad V+(s0) (forward) or grad E[W+(x)] (backward).
  BundleGrads grads;
  int samples = 0;
  double mean_abs_advantage = 0.0;
};

/// Per-trajectory weights default to 1/K; exact expectations pass P(tau).
/// Throws ContractError when cached log_pf differs from the current pi_F by
/// more than kStalenessTolerance. With log Z active, the log Z slot receives
/// the coefficient from grad_logz.
GradEstimate grad_actor_forward(const PolicyBundle& bundle, const Environment& env,
                                std::span<const Trajectory> batch, double gamma,
                                std::span<const double> weights = {}, Exec exec = Exec::kParallel);
GradEstimate grad_actor_backward(const PolicyBundle& bundle, const Environment& env,
                                 std::span<const Trajectory> batch, double gamma,
                                 std::span<const double> weights = {}, Exec exec = Exec::kParallel);

/// (1/K) sum_tau sum_h R(s_h -> s_{h+1}), the coefficient on grad log Z.
double grad_logz(const PolicyBundle& bundle, std::span<const Trajectory> batch,
                 std::span<const double> weights = {});

}  // namespace subflow
