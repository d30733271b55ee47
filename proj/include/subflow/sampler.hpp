#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "subflow/env.hpp"
#include "subflow/policy.hpp"

namespace subflow {

/// s0 -> ... -> x -> s_f with the log-probabilities of each realized edge.
/// log_pb of the terminal edge is not modelled and stays 0.
struct Trajectory {
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<double> log_pf;
  std::vector<double> log_pb;
  double terminal_reward = 0.0;
  double log_reward = 0.0;

  int length() const { return static_cast<int>(actions.size()); }
  const State& terminal() const { return states[states.size() - 2]; }
};

struct SamplerConfig {
  int batch = 128;
  double alpha = 1.0;
  double alpha_decay = 0.99;
  std::uint64_t seed = 0;
};

/// alpha <- alpha * alpha_decay; returns the new alpha.
double decay_alpha(SamplerConfig& cfg);

/// Identifies one batch: trajectory k of the batch uses the stream keyed by
/// (seed, iteration, stream, k).
struct BatchKey {
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
  std::uint64_t stream = 0;
};

/// K on-policy trajectories from pi_F.
std::vector<Trajectory> sample_forward(const PolicyBundle& bundle, const Environment& env, int batch,
                                       const BatchKey& key);
/// Per transition: uniform over valid actions with probability alpha, pi_F
/// otherwise. log_pf still records pi_F's probability of the realized action.
std::vector<Trajectory> sample_offline(const PolicyBundle& bundle, const Environment& env, int batch,
                                       double alpha, const BatchKey& key);
/// One trajectory per terminal, walked backwards with pi_B to s0.
std::vector<Trajectory> sample_backward(const PolicyBundle& bundle, const Environment& env,
                                        std::span<const State> terminals, const BatchKey& key);

/// Recomputes log_pf and log_pb from the current parameters.
void refresh_log_probs(const PolicyBundle& bundle, const Environment& env,
                       std::span<Trajectory> batch);

/// Throws ContractError when `t` is not a well-formed trajectory of `env`.
void validate_trajectory(const Environment& env, const Trajectory& t);

}  // namespace subflow
