#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subflow/checkpoint.hpp"
#include "subflow/mlp.hpp"
#include "subflow/objectives.hpp"
#include "subflow/oracle.hpp"
#include "subflow/policy.hpp"

namespace subflow {

enum class Workflow { kOnlinePg, kOfflinePg, kSubtb };
enum class CriticKind { kSubeb, kLambdaTd, kSubtb };

std::string to_string(Workflow w);
std::string to_string(CriticKind c);

struct LearningRates {
  double forward = 1e-3;
  double backward = 1e-3;
  double value = 5e-3;
  double backward_value = 1e-3;
  double flow = 1e-3;
  double log_z = 0.1;

  double of(HeadId id) const;
};

struct TrainConfig {
  Workflow workflow = Workflow::kOnlinePg;
  CriticKind critic = CriticKind::kSubeb;
  WeightScheme scheme;
  double gamma = 0.99;
  int batch = 128;
  int iterations = 1000;
  int metric_every = 20;
  int checkpoint_every = 20;
  std::uint64_t seed = 0;
  double alpha0 = 1.0;
  double alpha_decay = 0.99;
  PolicyConfig policy;
  LearningRates lr;
  nlohmann::json env;
  bool wall_clock = false;
  bool update_theta = true;
  bool update_phi = true;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;
};

/// Validates and fills defaults. Throws ConfigError naming the dotted key.
TrainConfig parse_train_config(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);

struct MetricsRow {
  int iteration = 0;
  double loss_critic = 0.0;
  double grad_norm_actor = 0.0;
  std::optional<double> d_tv;
  std::optional<double> d_jsd;
  std::optional<double> mode_accuracy;
  double mean_reward = 0.0;
  std::optional<double> alpha;
  std::optional<double> wall_clock_ms;
};

inline constexpr const char* kMetricsHeader =
    "iteration,loss_critic,grad_norm_actor,d_tv,d_jsd,mode_accuracy,mean_reward,alpha,wall_clock_ms";
std::string format_row(const MetricsRow& r);
/// Parses one data line written by format_row.
MetricsRow parse_row(const std::string& line);

/// Distribution metrics of the bundle's pi_F. Exact when `graph` is given;
/// otherwise mean reward over `samples` trajectories drawn with `seed`.
MetricsRow evaluate_bundle(const PolicyBundle& bundle, const Environment& env, const StateGraph* graph,
                           std::uint64_t seed, int samples = 1024);

/// Throws ContractError unless `ck` was written for `env` (description and
/// network widths).
void require_checkpoint_fits(const Checkpoint& ck, const Environment& env);
/// require_checkpoint_fits, then evaluate_bundle.
MetricsRow evaluate_checkpoint(const Checkpoint& ck, const Environment& env,
                               std::uint64_t cap = kDefaultEnumerationCap, std::uint64_t seed = 0);

/// Thrown when more than ten consecutive iterations hit non-finite values.
class RunAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  const Environment& env() const { return *env_; }
  const PolicyBundle& bundle() const { return bundle_; }
  PolicyBundle& bundle() { return bundle_; }
  const StateGraph* graph() const { return graph_ ? &*graph_ : nullptr; }
  double alpha() const { return alpha_; }
  int iteration() const { return iteration_; }
  int skipped() const { return skipped_total_; }

  /// One iteration of the configured workflow. Returns false when the
  /// iteration was skipped for non-finite values.
  bool step();
  MetricsRow metrics_row(double loss, double grad_norm) const;

  /// Runs to `iterations`; writes config.json, metrics.csv and checkpoints
  /// under `out` when non-empty. Rows are also returned.
  std::vector<MetricsRow> run(const std::filesystem::path& out = {},
                              std::ostream* log = nullptr);

  nlohmann::json checkpoint_meta() const;

  /// Called after the phi step and before the theta step of an online
  /// iteration (ordering checks in tests).
  std::function<void(const Trainer&)> on_between_steps;

 private:
  bool step_online();
  bool step_offline();
  bool step_subtb();
  void apply(HeadId id, const std::vector<double>& grad, double sign);

  TrainConfig cfg_;
  std::unique_ptr<Environment> env_;
  std::optional<StateGraph> graph_;
  PolicyBundle bundle_;
  std::vector<AdamState> adam_;
  double alpha_ = 1.0;
  int iteration_ = 0;
  int consecutive_skips_ = 0;
  int skipped_total_ = 0;
  double last_loss_ = 0.0;
  double last_grad_norm_ = 0.0;
  std::chrono::steady_clock::time_point start_{};
};

}  // namespace subflow
