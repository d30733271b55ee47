#pragma once

#include <cstdint>
#include <vector>

#include "subflow/env.hpp"

namespace subflow {

/// Synthetic multimodal score: mean of Gaussian bumps over Hamming distance to
/// a set of mode sequences, raised to beta and mapped onto [r_min, r_max].
struct SequenceReward {
  std::vector<std::vector<int>> modes;
  double sigma = 1.0;
  double beta = 3.0;
  double r_min = 1e-3;
  double r_max = 10.0;
};

/// Sequences of fixed length D over M building blocks, built by appending or
/// prepending one block per step. Graded: every terminal has exactly D blocks.
/// Unfilled slots hold -1; s_f is (M,...,M).
///
/// Actions: 0..M-1 append block b, M..2M-1 prepend block b, 2M terminates.
/// Appending and prepending to s0 (or to a run of equal blocks) reach the same
/// child through different actions, so the DAG has parallel edges; policies
/// and oracles work per action rather than per child state.
class SequenceEnv final : public Environment {
 public:
  SequenceEnv(int length, int alphabet, SequenceReward reward);

  /// Modes drawn deterministically from `reward_seed`.
  static SequenceReward default_reward(int length, int alphabet, int num_modes,
                                       double beta, std::uint64_t reward_seed);

  int length() const { return length_; }
  int alphabet() const { return alphabet_; }
  const SequenceReward& reward_spec() const { return reward_; }

  std::string name() const override;
  int action_count() const override { return 2 * alphabet_ + 1; }
  Action terminate_action() const override { return 2 * alphabet_; }
  int horizon_bound() const override { return length_; }
  int encoding_width() const override { return length_ * (alphabet_ + 1); }

  State initial() const override;
  State final_state() const override;

  ActionMask valid_actions(const State& s) const override;
  State step(const State& s, Action a) const override;
  std::vector<ParentEdge> parents(const State& s) const override;
  ActionMask backward_actions(const State& s) const override;
  State parent_via(const State& s, Action a) const override;

  bool is_terminating(const State& s) const override;
  double reward(const State& x) const override;
  void encode(const State& s, std::span<double> out) const override;
  std::uint64_t key(const State& s) const override;
  std::optional<std::uint64_t> state_count() const override;
  nlohmann::json describe() const override;

 private:
  int filled(const State& s) const { return s.step; }

  int length_;
  int alphabet_;
  SequenceReward reward_;
};

}  // namespace subflow
