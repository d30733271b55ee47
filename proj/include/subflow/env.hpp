#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace subflow {

using Action = int;

/// A node of the generative DAG. `cells` is the environment-specific integer
/// encoding; `step` counts actions taken from s0 on the realized path.
struct State {
  std::vector<int> cells;
  int step = 0;
  bool final = false;

  friend bool operator==(const State& a, const State& b) {
    return a.final == b.final && a.cells == b.cells;
  }
};

struct ParentEdge {
  State parent;
  Action action;
};

using ActionMask = std::vector<std::uint8_t>;

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

/// Immutable DAG environment. All methods are const and thread-safe.
///
/// Actions are indexed 0..action_count()-1 with terminate_action() mapping any
/// terminating state to s_f. A (parent, action) pair is recoverable from the
/// child and the action index, so backward policies are distributions over
/// action indices too ("which edge led here").
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual int action_count() const = 0;
  virtual Action terminate_action() const = 0;
  /// Maximum number of non-terminate actions on any trajectory.
  virtual int horizon_bound() const = 0;
  virtual int encoding_width() const = 0;

  virtual State initial() const = 0;
  virtual State final_state() const = 0;

  virtual ActionMask valid_actions(const State& s) const = 0;
  virtual State step(const State& s, Action a) const = 0;
  virtual std::vector<ParentEdge> parents(const State& s) const = 0;
  /// Mask over action indices naming the edges into `s` (s0 and s_f excluded).
  virtual ActionMask backward_actions(const State& s) const = 0;
  /// Inverse of step for non-terminate edges.
  virtual State parent_via(const State& s, Action a) const = 0;

  virtual bool is_terminating(const State& s) const = 0;
  virtual double reward(const State& x) const = 0;
  virtual void encode(const State& s, std::span<double> out) const = 0;
  /// Injective over all states of the environment, s_f included.
  virtual std::uint64_t key(const State& s) const = 0;
  /// Number of non-final states, if it fits in 64 bits.
  virtual std::optional<std::uint64_t> state_count() const = 0;

  /// Config fragment that rebuilds this environment via make_environment.
  virtual nlohmann::json describe() const = 0;

  int parent_count(const State& s) const;
  std::vector<double> encode(const State& s) const;
  bool enumerable(std::uint64_t cap = kDefaultEnumerationCap) const;
  /// All non-final states in nondecreasing step order. Throws CapabilityError
  /// when state_count() exceeds `cap`.
  std::vector<State> enumerate_states(std::uint64_t cap = kDefaultEnumerationCap) const;

 protected:
  void require_not_final(const State& s, const char* op) const;
};

/// Builds an environment from the `env` config object (kind, height, dims, ...).
std::unique_ptr<Environment> make_environment(const nlohmann::json& env_cfg);

std::string describe_state(const State& s);

}  // namespace subflow
