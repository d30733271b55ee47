#pragma once

#include "subflow/env.hpp"

namespace subflow {

struct HypergridReward {
  double r0 = 1e-2;
  double r1 = 0.5;
  double r2 = 2.0;
};

/// D-dimensional grid of height N. From s0 = (0,...,0) each action increments
/// one coordinate (staying below N) or stops; every state can terminate, so
/// the DAG is not graded at s_f. s_f is encoded as (-1,...,-1).
///
/// Actions: 0..D-1 increment dimension d, D terminates.
class Hypergrid final : public Environment {
 public:
  Hypergrid(int height, int dims, HypergridReward reward = {});

  int height() const { return height_; }
  int dims() const { return dims_; }

  std::string name() const override;
  int action_count() const override { return dims_ + 1; }
  Action terminate_action() const override { return dims_; }
  int horizon_bound() const override { return dims_ * (height_ - 1); }
  int encoding_width() const override { return dims_ * height_; }

  State initial() const override;
  State final_state() const override;

  ActionMask valid_actions(const State& s) const override;
  State step(const State& s, Action a) const override;
  std::vector<ParentEdge> parents(const State& s) const override;
  ActionMask backward_actions(const State& s) const override;
  State parent_via(const State& s, Action a) const override;

  bool is_terminating(const State& s) const override { return !s.final; }
  double reward(const State& x) const override;
  void encode(const State& s, std::span<double> out) const override;
  std::uint64_t key(const State& s) const override;
  std::optional<std::uint64_t> state_count() const override;
  nlohmann::json describe() const override;

 private:
  void check_cells(const State& s) const;

  int height_;
  int dims_;
  HypergridReward reward_;
};

}  // namespace subflow
