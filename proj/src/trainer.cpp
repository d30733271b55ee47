#include "subflow/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "subflow/actor.hpp"
#include "subflow/errors.hpp"
#include "subflow/rng.hpp"
#include "subflow/sampler.hpp"

namespace subflow {

std::string to_string(Workflow w) {
  switch (w) {
    case Workflow::kOnlinePg:
      return "online_pg";
    case Workflow::kOfflinePg:
      return "offline_pg";
    case Workflow::kSubtb:
      return "subtb";
  }
  return "?";
}

std::string to_string(CriticKind c) {
  switch (c) {
    case CriticKind::kSubeb:
      return "subeb";
    case CriticKind::kLambdaTd:
      return "lambda_td";
    case CriticKind::kSubtb:
      return "subtb";
  }
  return "?";
}

double LearningRates::of(HeadId id) const {
  switch (id) {
    case HeadId::kForward:
      return forward;
    case HeadId::kBackward:
      return backward;
    case HeadId::kValue:
      return value;
    case HeadId::kBackwardValue:
      return backward_value;
    case HeadId::kFlow:
      return flow;
    case HeadId::kLogZ:
      return log_z;
  }
  return 0.0;
}

// ---- config ---------------------------------------------------------------

namespace {

class Section {
 public:
  Section(const nlohmann::json& root, std::string path, std::set<std::string> keys)
      : path_(std::move(path)) {
    if (root.is_null()) {
      return;
    }
    if (!root.is_object()) {
      throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
    for (const auto& [k, v] : root.items()) {
      if (!keys.contains(k)) {
        throw ConfigError(key(k), "unknown key");
      }
    }
    node_ = &root;
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) const { return node_ && node_->contains(k); }
  const nlohmann::json& at(const std::string& k) const { return node_->at(k); }

  double number(const std::string& k, double fallback) const {
    if (!has(k)) {
      return fallback;
    }
    if (!at(k).is_number()) {
      throw ConfigError(key(k), "expected a number");
    }
    return at(k).get<double>();
  }
  std::int64_t integer(const std::string& k, std::int64_t fallback) const {
    if (!has(k)) {
      return fallback;
    }
    if (!at(k).is_number_integer()) {
      throw ConfigError(key(k), "expected an integer");
    }
    return at(k).get<std::int64_t>();
  }
  bool boolean(const std::string& k, bool fallback) const {
    if (!has(k)) {
      return fallback;
    }
    if (!at(k).is_boolean()) {
      throw ConfigError(key(k), "expected true or false");
    }
    return at(k).get<bool>();
  }
  std::string text(const std::string& k, const std::string& fallback) const {
    if (!has(k)) {
      return fallback;
    }
    if (!at(k).is_string()) {
      throw ConfigError(key(k), "expected a string");
    }
    return at(k).get<std::string>();
  }
  Section sub(const std::string& k, std::set<std::string> keys) const {
    static const nlohmann::json kNull;
    return Section(has(k) ? at(k) : kNull, key(k), std::move(keys));
  }

 private:
  const nlohmann::json* node_ = nullptr;
  std::string path_;
};

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) {
    throw ConfigError(path, what);
  }
}

}  // namespace

TrainConfig parse_train_config(const nlohmann::json& j) {
  const Section root(j, "",
                     {"seed", "workflow", "iterations", "metric_every", "checkpoint_every", "wall_clock",
                      "update_theta", "update_phi", "env", "policy", "objective", "actor", "sampler",
                      "optim", "oracle"});
  TrainConfig c;
  if (!root.has("env")) {
    throw ConfigError("env.kind", "missing required key");
  }
  c.env = root.at("env");
  make_environment(c.env);  // validates env.*

  const std::string wf = root.text("workflow", "online_pg");
  if (wf == "online_pg") {
    c.workflow = Workflow::kOnlinePg;
  } else if (wf == "offline_pg") {
    c.workflow = Workflow::kOfflinePg;
  } else if (wf == "subtb") {
    c.workflow = Workflow::kSubtb;
  } else {
    throw ConfigError("workflow", "unknown workflow '" + wf + "' (expected online_pg, offline_pg or subtb)");
  }

  const auto seed = root.integer("seed", 0);
  require(seed >= 0, "seed", "must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  const auto iters = root.integer("iterations", c.iterations);
  require(iters >= 1, "iterations", "must be >= 1");
  c.iterations = static_cast<int>(iters);
  const auto every = root.integer("metric_every", c.metric_every);
  require(every >= 1, "metric_every", "must be >= 1");
  c.metric_every = static_cast<int>(every);
  const auto ck_every = root.integer("checkpoint_every", c.metric_every);
  require(ck_every >= 1, "checkpoint_every", "must be >= 1");
  c.checkpoint_every = static_cast<int>(ck_every);
  c.wall_clock = root.boolean("wall_clock", false);
  c.update_theta = root.boolean("update_theta", true);
  c.update_phi = root.boolean("update_phi", true);

  const Section obj = root.sub("objective", {"kind", "lambda", "weights"});
  const std::string default_kind = c.workflow == Workflow::kSubtb ? "subtb" : "subeb";
  const std::string kind = obj.text("kind", default_kind);
  if (kind == "subeb") {
    c.critic = CriticKind::kSubeb;
  } else if (kind == "lambda_td") {
    c.critic = CriticKind::kLambdaTd;
  } else if (kind == "subtb") {
    c.critic = CriticKind::kSubtb;
  } else {
    throw ConfigError("objective.kind", "unknown objective '" + kind + "' (expected subtb, subeb or lambda_td)");
  }
  require((c.workflow == Workflow::kSubtb) == (c.critic == CriticKind::kSubtb), "objective.kind",
          "subtb objective goes with the subtb workflow and only there");
  require(!(c.workflow == Workflow::kOfflinePg && c.critic == CriticKind::kLambdaTd), "objective.kind",
          "offline_pg trains W with backward Sub-EB; lambda_td is online only");
  c.scheme.lambda = obj.number("lambda", 0.9);
  require(c.scheme.lambda > 0.0, "objective.lambda", "must be > 0");
  try {
    c.scheme.kind = parse_weight_kind(obj.text("weights", "subtb_geometric"));
  } catch (const std::exception& e) {
    throw ConfigError("objective.weights", e.what());
  }

  const Section actor = root.sub("actor", {"gamma", "lr"});
  c.gamma = actor.number("gamma", 0.99);
  require(c.gamma >= 0.0 && c.gamma <= 1.0, "actor.gamma", "must lie in [0, 1]");
  c.lr.forward = actor.number("lr", 1e-3);

  const Section optim = root.sub("optim", {"lr_backward", "lr_value", "lr_backward_value", "lr_flow", "lr_logz"});
  c.lr.backward = optim.number("lr_backward", c.lr.backward);
  c.lr.value = optim.number("lr_value", c.lr.value);
  c.lr.backward_value = optim.number("lr_backward_value", c.lr.backward_value);
  c.lr.flow = optim.number("lr_flow", c.lr.flow);
  c.lr.log_z = optim.number("lr_logz", c.lr.log_z);
  require(c.lr.forward > 0.0, "actor.lr", "must be > 0");
  for (const char* k : {"lr_backward", "lr_value", "lr_backward_value", "lr_flow", "lr_logz"}) {
    require(optim.number(k, 1.0) > 0.0, optim.key(k), "must be > 0");
  }

  const Section sampler = root.sub("sampler", {"batch", "alpha0", "alpha_decay"});
  const auto batch = sampler.integer("batch", 128);
  require(batch >= 1, "sampler.batch", "must be >= 1");
  c.batch = static_cast<int>(batch);
  c.alpha0 = sampler.number("alpha0", 1.0);
  require(c.alpha0 >= 0.0 && c.alpha0 <= 1.0, "sampler.alpha0", "must lie in [0, 1]");
  c.alpha_decay = sampler.number("alpha_decay", 0.99);
  require(c.alpha_decay >= 0.0 && c.alpha_decay <= 1.0, "sampler.alpha_decay", "must lie in [0, 1]");

  const Section policy = root.sub("policy", {"backward", "hidden", "depth", "use_logz", "activation"});
  const std::string backward = policy.text("backward", "uniform");
  if (backward == "uniform") {
    c.policy.backward = BackwardMode::kUniform;
  } else if (backward == "learned") {
    c.policy.backward = BackwardMode::kLearned;
  } else {
    throw ConfigError("policy.backward", "expected uniform or learned");
  }
  const auto hidden = policy.integer("hidden", 256);
  require(hidden >= 1, "policy.hidden", "must be >= 1");
  c.policy.hidden = static_cast<int>(hidden);
  const auto depth = policy.integer("depth", 4);
  require(depth >= 0, "policy.depth", "must be >= 0");
  c.policy.depth = static_cast<int>(depth);
  c.policy.use_logz = policy.boolean("use_logz", false);
  require(!c.policy.use_logz || c.workflow == Workflow::kOnlinePg, "policy.use_logz",
          "log Z is only learned by the online workflow");
  try {
    c.policy.activation = parse_activation(policy.text("activation", "leaky_relu"));
  } catch (const std::exception& e) {
    throw ConfigError("policy.activation", e.what());
  }
  c.policy.value_head = c.workflow == Workflow::kOnlinePg;
  c.policy.backward_value_head = c.workflow == Workflow::kOfflinePg;
  c.policy.flow_head = c.workflow == Workflow::kSubtb;

  const Section oracle = root.sub("oracle", {"cap"});
  const auto cap = oracle.integer("cap", static_cast<std::int64_t>(kDefaultEnumerationCap));
  require(cap >= 1, "oracle.cap", "must be >= 1");
  c.enumeration_cap = static_cast<std::uint64_t>(cap);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"seed", c.seed},
      {"workflow", to_string(c.workflow)},
      {"iterations", c.iterations},
      {"metric_every", c.metric_every},
      {"checkpoint_every", c.checkpoint_every},
      {"wall_clock", c.wall_clock},
      {"update_theta", c.update_theta},
      {"update_phi", c.update_phi},
      {"env", c.env},
      {"policy",
       {{"backward", c.policy.backward == BackwardMode::kLearned ? "learned" : "uniform"},
        {"hidden", c.policy.hidden},
        {"depth", c.policy.depth},
        {"use_logz", c.policy.use_logz},
        {"activation", to_string(c.policy.activation)}}},
      {"objective",
       {{"kind", to_string(c.critic)}, {"lambda", c.scheme.lambda}, {"weights", to_string(c.scheme.kind)}}},
      {"actor", {{"gamma", c.gamma}, {"lr", c.lr.forward}}},
      {"sampler", {{"batch", c.batch}, {"alpha0", c.alpha0}, {"alpha_decay", c.alpha_decay}}},
      {"optim",
       {{"lr_backward", c.lr.backward},
        {"lr_value", c.lr.value},
        {"lr_backward_value", c.lr.backward_value},
        {"lr_flow", c.lr.flow},
        {"lr_logz", c.lr.log_z}}},
      {"oracle", {{"cap", c.enumeration_cap}}},
  };
}

// ---- metrics --------------------------------------------------------------

namespace {

void put_real(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void put_optional(std::string& out, const std::optional<double>& v) {
  if (v) {
    put_real(out, *v);
  }
}

}  // namespace

std::string format_row(const MetricsRow& r) {
  std::string out = std::to_string(r.iteration);
  out += ',';
  put_real(out, r.loss_critic);
  out += ',';
  put_real(out, r.grad_norm_actor);
  out += ',';
  put_optional(out, r.d_tv);
  out += ',';
  put_optional(out, r.d_jsd);
  out += ',';
  put_optional(out, r.mode_accuracy);
  out += ',';
  put_real(out, r.mean_reward);
  out += ',';
  put_optional(out, r.alpha);
  out += ',';
  put_optional(out, r.wall_clock_ms);
  return out;
}

MetricsRow parse_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream in(line);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') {
    cells.emplace_back();
  }
  if (cells.size() != 9) {
    throw ContractError("metrics row needs 9 fields, got " + std::to_string(cells.size()));
  }
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) {
      return std::nullopt;
    }
    return std::stod(s);
  };
  MetricsRow r;
  r.iteration = std::stoi(cells[0]);
  r.loss_critic = std::stod(cells[1]);
  r.grad_norm_actor = std::stod(cells[2]);
  r.d_tv = opt(cells[3]);
  r.d_jsd = opt(cells[4]);
  r.mode_accuracy = opt(cells[5]);
  r.mean_reward = std::stod(cells[6]);
  r.alpha = opt(cells[7]);
  r.wall_clock_ms = opt(cells[8]);
  return r;
}

MetricsRow evaluate_bundle(const PolicyBundle& bundle, const Environment& env, const StateGraph* graph,
                           std::uint64_t seed, int samples) {
  MetricsRow row;
  if (graph) {
    const PolicyTables tables = tables_from_bundle(*graph, env, bundle);
    const DistTable p = dp_forward_terminal_dist(*graph, tables);
    const DistTable target = target_dist(*graph);
    const std::vector<double> rewards = terminal_rewards(*graph, target);
    row.d_tv = metric_tv(p, target);
    row.d_jsd = metric_jsd(p, target);
    row.mode_accuracy = metric_mode_accuracy(p, target, rewards);
    double mean = 0.0;
    for (std::size_t k = 0; k < p.prob.size(); ++k) {
      mean += p.prob[k] * rewards[k];
    }
    row.mean_reward = mean;
    return row;
  }
  const auto batch = sample_forward(bundle, env, samples, BatchKey{seed, 0, 0xE7A1});
  double sum = 0.0;
  for (const auto& t : batch) {
    sum += t.terminal_reward;
  }
  row.mean_reward = sum / static_cast<double>(batch.size());
  return row;
}

void require_checkpoint_fits(const Checkpoint& ck, const Environment& env) {
  if (!ck.meta.contains("env") || ck.meta.at("env") != env.describe()) {
    throw ContractError("checkpoint was written for env " +
                        (ck.meta.contains("env") ? ck.meta.at("env").dump() : std::string("<none>")) +
                        ", not " + env.describe().dump());
  }
  if (ck.bundle.forward.input_width() != env.encoding_width() ||
      ck.bundle.forward.output_width() != env.action_count()) {
    throw ContractError("checkpoint forward network does not fit the environment's encoding");
  }
}

MetricsRow evaluate_checkpoint(const Checkpoint& ck, const Environment& env, std::uint64_t cap,
                               std::uint64_t seed) {
  require_checkpoint_fits(ck, env);
  std::optional<StateGraph> graph;
  if (env.enumerable(cap)) {
    graph = StateGraph::build(env, cap);
  }
  MetricsRow row = evaluate_bundle(ck.bundle, env, graph ? &*graph : nullptr, seed);
  if (ck.meta.contains("iteration")) {
    row.iteration = ck.meta.at("iteration").get<int>();
  }
  return row;
}

// ---- trainer --------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), env_(make_environment(cfg_.env)) {
  if (env_->enumerable(cfg_.enumeration_cap)) {
    graph_ = StateGraph::build(*env_, cfg_.enumeration_cap);
  }
  std::uint64_t s = cfg_.seed ^ 0x5eedf10eULL;
  std::mt19937_64 gen(splitmix64(s));
  bundle_ = PolicyBundle::create(*env_, cfg_.policy, gen);
  adam_.resize(kHeadCount);
  for (int h = 0; h < kHeadCount; ++h) {
    const auto id = static_cast<HeadId>(h);
    if (bundle_.has(id)) {
      adam_[h] = AdamState(bundle_.size(id), cfg_.lr.of(id));
    }
  }
  alpha_ = cfg_.workflow == Workflow::kOnlinePg ? 0.0 : cfg_.alpha0;
  start_ = std::chrono::steady_clock::now();
}

void Trainer::apply(HeadId id, const std::vector<double>& grad, double sign) {
  if (!bundle_.has(id)) {
    return;
  }
  const bool allowed = head_owner(id) == ParamSet::kTheta ? cfg_.update_theta : cfg_.update_phi;
  if (!allowed) {
    return;
  }
  std::vector<double> g(grad.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = sign * grad[i];
  }
  adam_step(bundle_.params(id), g, adam_[static_cast<std::size_t>(id)]);
}

bool Trainer::step_online() {
  auto batch = sample_forward(bundle_, *env_, cfg_.batch, BatchKey{cfg_.seed, static_cast<std::uint64_t>(iteration_), 0});
  BundleGrads critic(bundle_);
  const ResidualReport rep = cfg_.critic == CriticKind::kLambdaTd
                                 ? loss_lambda_td(bundle_, *env_, batch, cfg_.scheme.lambda, critic)
                                 : loss_weighted(bundle_, *env_, batch, ResidualKind::kSubeb, cfg_.scheme, critic);
  if (!critic.finite()) {
    throw NumericalError("non-finite critic gradient");
  }
  apply(HeadId::kValue, critic[HeadId::kValue], 1.0);
  apply(HeadId::kBackward, critic[HeadId::kBackward], 1.0);
  if (on_between_steps) {
    on_between_steps(*this);
  }
  refresh_log_probs(bundle_, *env_, batch);
  const GradEstimate est = grad_actor_forward(bundle_, *env_, batch, cfg_.gamma);
  if (!est.grads.finite()) {
    throw NumericalError("non-finite actor gradient");
  }
  apply(HeadId::kForward, est.grads[HeadId::kForward], -1.0);
  apply(HeadId::kLogZ, est.grads[HeadId::kLogZ], -1.0);
  last_loss_ = rep.loss;
  last_grad_norm_ = est.grads.norm(ParamSet::kTheta);
  return true;
}

bool Trainer::step_offline() {
  const auto it = static_cast<std::uint64_t>(iteration_);
  const auto pool = sample_offline(bundle_, *env_, cfg_.batch, alpha_, BatchKey{cfg_.seed, it, 0});
  std::vector<State> terminals;
  terminals.reserve(pool.size());
  for (const auto& t : pool) {
    terminals.push_back(t.terminal());
  }
  auto batch = sample_backward(bundle_, *env_, terminals, BatchKey{cfg_.seed, it, 1});
  BundleGrads critic(bundle_);
  const ResidualReport rep =
      loss_weighted(bundle_, *env_, batch, ResidualKind::kSubebBackward, cfg_.scheme, critic);
  if (!critic.finite()) {
    throw NumericalError("non-finite backward Sub-EB gradient");
  }
  apply(HeadId::kBackwardValue, critic[HeadId::kBackwardValue], 1.0);
  apply(HeadId::kForward, critic[HeadId::kForward], 1.0);
  refresh_log_probs(bundle_, *env_, batch);
  const GradEstimate est = grad_actor_backward(bundle_, *env_, batch, cfg_.gamma);
  if (!est.grads.finite()) {
    throw NumericalError("non-finite backward actor gradient");
  }
  apply(HeadId::kBackward, est.grads[HeadId::kBackward], -1.0);
  last_loss_ = rep.loss;
  last_grad_norm_ = est.grads.norm(ParamSet::kPhi);
  return true;
}

bool Trainer::step_subtb() {
  const auto batch = sample_offline(bundle_, *env_, cfg_.batch, alpha_,
                                    BatchKey{cfg_.seed, static_cast<std::uint64_t>(iteration_), 0});
  BundleGrads g(bundle_);
  const ResidualReport rep = loss_weighted(bundle_, *env_, batch, ResidualKind::kSubtb, cfg_.scheme, g);
  if (!g.finite()) {
    throw NumericalError("non-finite Sub-TB gradient");
  }
  apply(HeadId::kForward, g[HeadId::kForward], 1.0);
  apply(HeadId::kFlow, g[HeadId::kFlow], 1.0);
  apply(HeadId::kBackward, g[HeadId::kBackward], 1.0);
  last_loss_ = rep.loss;
  last_grad_norm_ = std::sqrt([&] {
    double s = 0.0;
    for (double v : g[HeadId::kForward]) {
      s += v * v;
    }
    return s;
  }());
  return true;
}

bool Trainer::step() {
  ++iteration_;
  bool ok = true;
  try {
    switch (cfg_.workflow) {
      case Workflow::kOnlinePg:
        step_online();
        break;
      case Workflow::kOfflinePg:
        step_offline();
        break;
      case Workflow::kSubtb:
        step_subtb();
        break;
    }
    consecutive_skips_ = 0;
  } catch (const NumericalError& e) {
    ok = false;
    ++skipped_total_;
    if (++consecutive_skips_ > 10) {
      throw RunAborted("aborted at iteration " + std::to_string(iteration_) +
                       " after 11 consecutive non-finite iterations: " + e.what());
    }
  }
  if (cfg_.workflow != Workflow::kOnlinePg) {
    alpha_ = cfg_.alpha0 * std::pow(cfg_.alpha_decay, iteration_);
  }
  return ok;
}

MetricsRow Trainer::metrics_row(double loss, double grad_norm) const {
  std::uint64_t s = cfg_.seed + static_cast<std::uint64_t>(iteration_);
  MetricsRow row = evaluate_bundle(bundle_, *env_, graph(), splitmix64(s));
  row.iteration = iteration_;
  row.loss_critic = loss;
  row.grad_norm_actor = grad_norm;
  if (cfg_.workflow != Workflow::kOnlinePg) {
    row.alpha = alpha_;
  }
  if (cfg_.wall_clock) {
    row.wall_clock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }
  return row;
}

nlohmann::json Trainer::checkpoint_meta() const {
  return {{"env", env_->describe()},
          {"workflow", to_string(cfg_.workflow)},
          {"iteration", iteration_},
          {"seed", cfg_.seed}};
}

std::vector<MetricsRow> Trainer::run(const std::filesystem::path& out, std::ostream* log) {
  std::ofstream csv;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream(out / "config.json") << to_json(cfg_).dump(2) << '\n';
    csv.open(out / "metrics.csv", std::ios::trunc);
    if (!csv) {
      throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
    }
    csv << kMetricsHeader << '\n';
  }
  std::vector<MetricsRow> rows;
  while (iteration_ < cfg_.iterations) {
    step();
    const bool last = iteration_ == cfg_.iterations;
    if (iteration_ % cfg_.metric_every == 0 || last) {
      rows.push_back(metrics_row(last_loss_, last_grad_norm_));
      const std::string line = format_row(rows.back());
      if (csv.is_open()) {
        csv << line << '\n';
        csv.flush();
      }
      if (log) {
        *log << line << '\n';
      }
    }
    if (!out.empty() && (iteration_ % cfg_.checkpoint_every == 0 || last)) {
      save_checkpoint(out / ("ckpt_" + std::to_string(iteration_) + ".bin"), checkpoint_meta(), bundle_);
    }
  }
  return rows;
}

}  // namespace subflow
