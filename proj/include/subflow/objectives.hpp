#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subflow/policy.hpp"
#include "subflow/sampler.hpp"

namespace subflow {

enum class Exec { kSerial, kParallel };

enum class WeightKind { kSubtbGeometric, kEdgesOnly, kFullOnly };
WeightKind parse_weight_kind(const std::string& name);
std::string to_string(WeightKind k);

/// Pair weights on a trajectory with `length` edges.
/// subtb_geometric: lambda^(j-i) normalized over that trajectory's pairs.
/// edges_only: 1 on single edges (DB). full_only: 1 on (0, length) (TB).
struct WeightScheme {
  double lambda = 0.9;
  WeightKind kind = WeightKind::kSubtbGeometric;

  double weight(int i, int j, int length) const;
};

/// All (i, j) with 0 <= i < j <= length, ordered by i then j.
std::vector<std::pair<int, int>> subtrajectory_pairs(int length);

enum class ResidualKind { kSubtb, kSubeb, kSubebBackward };

/// Per-edge term e_k = log pi_F(k) + h(s_k) - log pi_B(k) - h(s_{k+1}); on the
/// terminal edge the last two are replaced by `terminal_log_mass`.
/// Every pair residual is a sum of consecutive edge terms.
std::vector<double> edge_terms(const Trajectory& t, std::span<const double> head,
                               double terminal_log_mass);
double pair_residual(std::span<const double> terms, int i, int j);

/// log F per state of `t` (s_f excluded); F(s_f) P_B(x|s_f) := R(x).
double residual_subtb(const Trajectory& t, int i, int j, std::span<const double> log_flow);
/// V per state; P_B(x|s_f) exp V(s_f) := R(x)/Z, with log_z = 0 when Z is not used.
double residual_subeb(const Trajectory& t, int i, int j, std::span<const double> value,
                      double log_z = 0.0);
/// W per state; P_B(x|s_f) exp W(s_f) := R(x).
double residual_subeb_backward(const Trajectory& t, int i, int j, std::span<const double> w);

/// Loss and its derivatives for one batch of edge-term vectors.
struct TermGrads {
  double loss = 0.0;
  std::vector<double> per_trajectory;
  /// dL/de_k for each trajectory and edge.
  std::vector<std::vector<double>> edge;
  /// dL/dh(s_k) for each non-final state.
  std::vector<std::vector<double>> state;
};

/// (1/K) sum_tau sum_{i<j} w_{j-i} delta(tau_{i:j})^2.
TermGrads weighted_pair_loss(std::span<const std::vector<double>> terms, const WeightScheme& scheme,
                             Exec exec = Exec::kParallel);
/// (1/K) sum_tau sum_h (V^lambda(s_h) - V(s_h))^2 with the target held fixed.
/// `edge` is left empty: the target carries no gradient.
TermGrads lambda_td_loss(std::span<const std::vector<double>> terms, double lambda,
                         Exec exec = Exec::kParallel);

struct ResidualReport {
  double loss = 0.0;
  std::vector<std::vector<double>> edge_terms;
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;

  double residual(std::size_t traj, int i, int j) const {
    return pair_residual(edge_terms[traj], i, j);
  }
};

HeadId residual_head(ResidualKind kind);

/// Evaluates the weighted objective on `batch` (cached log-probabilities are
/// used as values) and adds its gradient into `grads`, touching only the
/// parameters the objective owns:
///   subtb: pi_F, log F, and pi_B when learned
///   subeb: V, and pi_B when learned
///   subeb_backward: W and pi_F
/// Throws NumericalError naming (trajectory, i, j) on a non-finite residual.
ResidualReport loss_weighted(const PolicyBundle& bundle, const Environment& env,
                             std::span<const Trajectory> batch, ResidualKind kind,
                             const WeightScheme& scheme, BundleGrads& grads,
                             Exec exec = Exec::kParallel);

/// lambda-TD critic loss for V; only V receives gradient.
ResidualReport loss_lambda_td(const PolicyBundle& bundle, const Environment& env,
                              std::span<const Trajectory> batch, double lambda, BundleGrads& grads,
                              Exec exec = Exec::kParallel);

}  // namespace subflow
