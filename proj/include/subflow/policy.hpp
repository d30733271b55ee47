#pragma once

#include <array>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "subflow/env.hpp"
#include "subflow/mlp.hpp"

namespace subflow {

/// theta: functions updated jointly with the forward policy.
/// phi: functions that are not.
enum class ParamSet { kTheta, kPhi };

enum class HeadId : int {
  kForward = 0,    // pi_F logits, theta
  kBackward,       // pi_B logits (learned mode), phi
  kValue,          // V, phi
  kBackwardValue,  // W, theta
  kFlow,           // log F for Sub-TB, theta
  kLogZ,           // scalar log Z, theta
};
inline constexpr int kHeadCount = 6;

const char* head_name(HeadId id);
ParamSet head_owner(HeadId id);

enum class BackwardMode { kUniform, kLearned };

struct PolicyConfig {
  BackwardMode backward = BackwardMode::kUniform;
  int hidden = 256;
  int depth = 4;  // number of hidden layers; 0 gives a linear map
  bool use_logz = false;
  Activation activation = Activation::kLeakyRelu;
  bool value_head = true;           // V
  bool backward_value_head = false; // W
  bool flow_head = false;           // log F
};

/// Forward policy, backward policy, evaluation heads and log Z.
/// Heads that are absent for a given workflow are left empty.
struct PolicyBundle {
  PolicyConfig config;
  Approximator forward;
  std::optional<Approximator> backward;
  std::optional<Approximator> value;
  std::optional<Approximator> backward_value;
  std::optional<Approximator> flow;
  double log_z = 0.0;

  static PolicyBundle create(const Environment& env, const PolicyConfig& cfg, std::mt19937_64& gen);

  bool has(HeadId id) const;
  /// Flat parameters of a head (log Z is a one-element span).
  std::span<double> params(HeadId id);
  std::span<const double> params(HeadId id) const;
  const Approximator& net(HeadId id) const;
  std::size_t size(HeadId id) const { return params(id).size(); }
};

/// One gradient buffer per head, aligned with PolicyBundle::params.
struct BundleGrads {
  std::array<std::vector<double>, kHeadCount> g;

  explicit BundleGrads(const PolicyBundle& bundle);
  std::vector<double>& operator[](HeadId id) { return g[static_cast<std::size_t>(id)]; }
  const std::vector<double>& operator[](HeadId id) const { return g[static_cast<std::size_t>(id)]; }
  void zero();
  void add(const BundleGrads& other);
  double norm(ParamSet owner) const;
  bool all_zero(ParamSet owner) const;
  bool finite() const;
};

Matrix encode_batch(const Environment& env, std::span<const State> states);

/// Masked log-softmax of logits restricted to `mask`; masked entries are -inf.
/// Masking happens on the logits before normalization.
std::vector<double> masked_log_softmax(std::span<const double> logits, const ActionMask& mask);

/// log pi_F(.|s) for each state (rows); -inf on invalid actions.
Matrix forward_log_probs(const PolicyBundle& bundle, const Environment& env,
                         std::span<const State> states);
std::vector<double> forward_log_probs(const PolicyBundle& bundle, const Environment& env,
                                      const State& s);

/// log pi_B(parent | child) where the edge into `child` is identified by
/// `action`. Uniform mode gives -log |parents(child)|. child must not be s_f.
double backward_log_prob(const PolicyBundle& bundle, const Environment& env, const State& child,
                         Action action);
/// log pi_B over edges into each child (rows); -inf where no such edge.
Matrix backward_log_probs(const PolicyBundle& bundle, const Environment& env,
                          std::span<const State> children);

/// Scalar head (V, W, log F) at each state.
std::vector<double> head_values(const PolicyBundle& bundle, HeadId id, const Environment& env,
                                std::span<const State> states);

/// log of pi~_B(x | s_f): R(x), or R(x)/Z when log Z is active.
double terminal_log_mass(const PolicyBundle& bundle, double reward);

/// R(s -> s') := log pi~_B(s|s') - log pi_F(s'|s), with pi~_B(x|s_f) = R(x)
/// (or R(x)/Z). `terminal_reward` must be supplied exactly when child is s_f.
double edge_reward_forward(const PolicyBundle& bundle, const Environment& env, const State& s,
                           Action a, const State& child, std::optional<double> terminal_reward);
/// R(s <- s') := log pi_F(s'|s) - log pi_B(s|s'). Non-terminal edges only.
double edge_reward_backward(const PolicyBundle& bundle, const Environment& env, const State& s,
                            Action a, const State& child);

/// Accumulates sum_n coeff_n * grad log pi_F(actions_n | states_n) into `grad`.
void accumulate_forward_logprob_grad(const PolicyBundle& bundle, const Environment& env,
                                     std::span<const State> states, std::span<const Action> actions,
                                     std::span<const double> coeffs, std::vector<double>& grad);
/// Same for the learned backward policy; states are the children.
void accumulate_backward_logprob_grad(const PolicyBundle& bundle, const Environment& env,
                                      std::span<const State> children, std::span<const Action> actions,
                                      std::span<const double> coeffs, std::vector<double>& grad);
/// Accumulates sum_n coeff_n * grad head(states_n) for a scalar head.
void accumulate_head_grad(const PolicyBundle& bundle, HeadId id, const Environment& env,
                          std::span<const State> states, std::span<const double> coeffs,
                          std::vector<double>& grad);

}  // namespace subflow
