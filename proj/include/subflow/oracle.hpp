#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "subflow/env.hpp"
#include "subflow/objectives.hpp"
#include "subflow/policy.hpp"
#include "subflow/sampler.hpp"

namespace subflow {

/// Explicit DAG of an enumerable environment. States are stored level by
/// level (level h holds the states reached after h actions); edges to s_f
/// use `kFinal` as the endpoint.
struct StateGraph {
  static constexpr int kFinal = -1;
  struct Edge {
    Action action;
    int other;  // child for `out`, parent for `in`
  };

  std::vector<State> states;
  std::vector<std::vector<Edge>> out;
  std::vector<std::vector<Edge>> in;
  std::vector<int> level_begin;  // level h is [level_begin[h], level_begin[h+1])
  std::vector<int> terminals;    // states that can move to s_f, in index order
  std::vector<double> log_reward;  // -inf for non-terminating states
  int action_count = 0;
  std::unordered_map<std::uint64_t, int> index;

  static StateGraph build(const Environment& env, std::uint64_t cap = kDefaultEnumerationCap);

  int size() const { return static_cast<int>(states.size()); }
  int levels() const { return static_cast<int>(level_begin.size()) - 1; }
  int index_of(const Environment& env, const State& s) const;
};

using LogTable = std::vector<std::vector<double>>;  // [state][action], -inf off-support

/// log pi_F(a|s) over outgoing actions and log pi_B(a|s) over the edges into s.
struct PolicyTables {
  LogTable log_pf;
  LogTable log_pb;
};

LogTable uniform_forward(const StateGraph& g);
LogTable uniform_backward(const StateGraph& g);
/// Masked softmax of N(0, scale^2) logits.
LogTable random_forward(const StateGraph& g, std::mt19937_64& gen, double scale = 1.0);
LogTable random_backward(const StateGraph& g, std::mt19937_64& gen, double scale = 1.0);
PolicyTables tables_from_bundle(const StateGraph& g, const Environment& env,
                                const PolicyBundle& bundle);

struct FlowTable {
  std::vector<double> log_flow;
  double log_z_star = 0.0;
};

/// F*(s) = sum over children of pi_B(s|s') F*(s'), with the edge x -> s_f
/// carrying R(x).
FlowTable dp_true_flow(const StateGraph& g, const PolicyTables& t, Exec exec = Exec::kParallel);
/// pi_F*(s'|s) = pi_B(s|s') F*(s') / F*(s), and R(x) / F*(x) on x -> s_f.
LogTable optimal_forward(const StateGraph& g, const PolicyTables& t, const FlowTable& flow);
/// log of the probability that a pi_F trajectory visits s.
std::vector<double> dp_log_visit(const StateGraph& g, const PolicyTables& t,
                                 Exec exec = Exec::kParallel);

struct DistTable {
  std::vector<int> terminals;
  std::vector<double> prob;
};

DistTable dp_forward_terminal_dist(const StateGraph& g, const PolicyTables& t,
                                   Exec exec = Exec::kParallel);
/// P*(x) = R(x) / Z*.
DistTable target_dist(const StateGraph& g);
std::vector<double> terminal_rewards(const StateGraph& g, const DistTable& d);

/// V+(s) = E_{P_F}[sum_i log pi~_B/pi_F] with pi~_B(x|s_f) = R(x)/Z, log_z = 0
/// meaning no Z.
std::vector<double> dp_v_dagger(const StateGraph& g, const PolicyTables& t, double log_z = 0.0,
                                Exec exec = Exec::kParallel);
/// W+(s0) = log_z_s0, W+(s') = E_{pi_B}[log pi_F/pi_B + W+(s)].
std::vector<double> dp_w_dagger(const StateGraph& g, const PolicyTables& t, double log_z_s0,
                                Exec exec = Exec::kParallel);
/// log F(s) of the forward flow of pi_F with F(s0) = exp(log_z).
std::vector<double> dp_forward_log_flow(const StateGraph& g, const PolicyTables& t, double log_z,
                                        Exec exec = Exec::kParallel);
/// KL(P_F(tau) || P_B(tau|x) P*(x)).
double dp_kl_forward(const StateGraph& g, const PolicyTables& t);
/// Value attached to the terminal edge x -> s_f: h(x) + log pi_F(s_f|x).
std::vector<double> terminal_values(const StateGraph& g, const PolicyTables& t,
                                    std::span<const double> h);

double metric_tv(const DistTable& p, const DistTable& q);
/// Jensen-Shannon divergence in nats.
double metric_jsd(const DistTable& p, const DistTable& q);
/// min(E_p[R] / E_q[R], 1) with q the target.
double metric_mode_accuracy(const DistTable& p_forward, const DistTable& p_star,
                            std::span<const double> rewards);

// ---- brute-force enumeration -------------------------------------------

struct EnumeratedTrajectory {
  std::vector<int> states;  // s0 .. x
  std::vector<Action> actions;  // last one terminates
  std::vector<double> log_pf;   // per edge
  std::vector<double> log_pb;   // per non-terminal edge
  double log_reward = 0.0;

  double log_prob_forward() const;
  double log_prob_backward() const;  // log P_B(tau | x)
};

/// Exact count of complete trajectories, by path counting.
double count_trajectories(const StateGraph& g);
/// Depth-first listing of every trajectory. Throws CapabilityError when the
/// count exceeds `cap`.
std::vector<EnumeratedTrajectory> enumerate_trajectories(const StateGraph& g, const PolicyTables& t,
                                                         std::uint64_t cap = kDefaultEnumerationCap);
Trajectory to_trajectory(const StateGraph& g, const Environment& env, const EnumeratedTrajectory& e);

std::vector<double> enum_log_true_flow(const StateGraph& g, std::span<const EnumeratedTrajectory> all);
DistTable enum_terminal_dist(const StateGraph& g, std::span<const EnumeratedTrajectory> all);
std::vector<double> enum_v_dagger(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                  double log_z = 0.0);
std::vector<double> enum_w_dagger(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                  double log_z_s0);
double enum_kl_forward(std::span<const EnumeratedTrajectory> all, double log_z_star);
/// KL(P_F(tau_{h:}|s) || P_B(tau_{h:}|s)) per state, P_B suffix measure
/// normalized by F*(s).
std::vector<double> enum_suffix_kl(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                   std::span<const double> log_true_flow);
/// KL(P_B(tau_{:h}|s) || P_F(tau_{:h}|s)) per state.
std::vector<double> enum_prefix_kl(const StateGraph& g, std::span<const EnumeratedTrajectory> all);

// ---- exact balance checks -------------------------------------------------

/// E[delta(tau_{i:i+l}) | s_i = s] for every state and span l = 1..levels,
/// subtrajectories clipped at s_f. The residual is the Sub-EB/Sub-TB form
/// with head h and P_B(x|s_f) exp h(s_f) := R(x) / Z.
struct ExpectationTable {
  LogTable by_state;  // [state][l - 1]
  double max_abs = 0.0;
  int worst_state = -1;
  int worst_span = 0;
};

ExpectationTable forward_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                           std::span<const double> h, double log_z = 0.0,
                                           Exec exec = Exec::kParallel);
/// E_{P_F}[delta(tau_{i:j})] by position: sum over level-i states of
/// visit(s) E[delta | s_i = s]. Indexed [i][j].
LogTable position_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                    const ExpectationTable& cond);
/// E[delta_W(tau_{j-l:j}) | s_j = s] under pi_B walks, for every non-final s
/// and l = 1..step(s) (clipped at s0). With `with_terminal`, spans ending at
/// s_f are added for terminating x, conditioned on x, as extra columns
/// [levels + l - 1].
ExpectationTable backward_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                            std::span<const double> w, bool with_terminal,
                                            Exec exec = Exec::kParallel);
/// max |delta_F(tau_{i:j})| over every pair of every enumerated trajectory.
double max_pointwise_subtb(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                           std::span<const double> log_flow);

}  // namespace subflow
