#include "subflow/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "subflow/errors.hpp"

namespace subflow {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<int> layer_widths(int in, int hidden, int depth, int out) {
  std::vector<int> w{in};
  for (int i = 0; i < depth; ++i) {
    w.push_back(hidden);
  }
  w.push_back(out);
  return w;
}

const Approximator& require(const std::optional<Approximator>& head, HeadId id) {
  if (!head) {
    throw ContractError(std::string("PolicyBundle: head '") + head_name(id) + "' is not active");
  }
  return *head;
}

}  // namespace

const char* head_name(HeadId id) {
  switch (id) {
    case HeadId::kForward:
      return "forward";
    case HeadId::kBackward:
      return "backward";
    case HeadId::kValue:
      return "value";
    case HeadId::kBackwardValue:
      return "backward_value";
    case HeadId::kFlow:
      return "flow";
    case HeadId::kLogZ:
      return "log_z";
  }
  return "?";
}

ParamSet head_owner(HeadId id) {
  switch (id) {
    case HeadId::kBackward:
    case HeadId::kValue:
      return ParamSet::kPhi;
    default:
      return ParamSet::kTheta;
  }
}

PolicyBundle PolicyBundle::create(const Environment& env, const PolicyConfig& cfg,
                                  std::mt19937_64& gen) {
  if (cfg.depth < 0 || cfg.hidden < 1) {
    throw ConfigError("policy.depth", "need depth >= 0 and hidden >= 1");
  }
  PolicyBundle b;
  b.config = cfg;
  const int in = env.encoding_width();
  auto make = [&](int out) {
    Approximator net(layer_widths(in, cfg.hidden, cfg.depth, out), cfg.activation);
    net.initialize(gen);
    return net;
  };
  b.forward = make(env.action_count());
  if (cfg.backward == BackwardMode::kLearned) {
    b.backward = make(env.action_count());
  }
  if (cfg.value_head) {
    b.value = make(1);
  }
  if (cfg.backward_value_head) {
    b.backward_value = make(1);
  }
  if (cfg.flow_head) {
    b.flow = make(1);
  }
  return b;
}

bool PolicyBundle::has(HeadId id) const {
  switch (id) {
    case HeadId::kForward:
      return true;
    case HeadId::kBackward:
      return backward.has_value();
    case HeadId::kValue:
      return value.has_value();
    case HeadId::kBackwardValue:
      return backward_value.has_value();
    case HeadId::kFlow:
      return flow.has_value();
    case HeadId::kLogZ:
      return config.use_logz;
  }
  return false;
}

std::span<double> PolicyBundle::params(HeadId id) {
  if (!has(id)) {
    return {};
  }
  if (id == HeadId::kLogZ) {
    return {&log_z, 1};
  }
  return const_cast<Approximator&>(net(id)).parameters();
}

std::span<const double> PolicyBundle::params(HeadId id) const {
  if (!has(id)) {
    return {};
  }
  if (id == HeadId::kLogZ) {
    return {&log_z, 1};
  }
  return net(id).parameters();
}

const Approximator& PolicyBundle::net(HeadId id) const {
  switch (id) {
    case HeadId::kForward:
      return forward;
    case HeadId::kBackward:
      return require(backward, id);
    case HeadId::kValue:
      return require(value, id);
    case HeadId::kBackwardValue:
      return require(backward_value, id);
    case HeadId::kFlow:
      return require(flow, id);
    case HeadId::kLogZ:
      break;
  }
  throw ContractError("PolicyBundle::net: log_z is a scalar, not a network");
}

BundleGrads::BundleGrads(const PolicyBundle& bundle) {
  for (int h = 0; h < kHeadCount; ++h) {
    g[static_cast<std::size_t>(h)].assign(bundle.size(static_cast<HeadId>(h)), 0.0);
  }
}

void BundleGrads::zero() {
  for (auto& v : g) {
    std::fill(v.begin(), v.end(), 0.0);
  }
}

void BundleGrads::add(const BundleGrads& other) {
  for (std::size_t h = 0; h < g.size(); ++h) {
    if (g[h].size() != other.g[h].size()) {
      throw ContractError("BundleGrads::add: layout mismatch");
    }
    for (std::size_t i = 0; i < g[h].size(); ++i) {
      g[h][i] += other.g[h][i];
    }
  }
}

double BundleGrads::norm(ParamSet owner) const {
  double sq = 0.0;
  for (int h = 0; h < kHeadCount; ++h) {
    if (head_owner(static_cast<HeadId>(h)) != owner) {
      continue;
    }
    for (double v : g[static_cast<std::size_t>(h)]) {
      sq += v * v;
    }
  }
  return std::sqrt(sq);
}

bool BundleGrads::all_zero(ParamSet owner) const {
  for (int h = 0; h < kHeadCount; ++h) {
    if (head_owner(static_cast<HeadId>(h)) != owner) {
      continue;
    }
    const auto& v = g[static_cast<std::size_t>(h)];
    if (std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; })) {
      return false;
    }
  }
  return true;
}

bool BundleGrads::finite() const {
  for (const auto& v : g) {
    if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) {
      return false;
    }
  }
  return true;
}

Matrix encode_batch(const Environment& env, std::span<const State> states) {
  const int w = env.encoding_width();
  Matrix x(static_cast<Eigen::Index>(states.size()), w);
  for (std::size_t i = 0; i < states.size(); ++i) {
    env.encode(states[i], std::span<double>(x.row(static_cast<Eigen::Index>(i)).data(),
                                            static_cast<std::size_t>(w)));
  }
  return x;
}

std::vector<double> masked_log_softmax(std::span<const double> logits, const ActionMask& mask) {
  if (logits.size() != mask.size()) {
    throw ContractError("masked_log_softmax: logits and mask differ in length");
  }
  double mx = kNegInf;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      mx = std::max(mx, logits[i]);
    }
  }
  if (mx == kNegInf) {
    throw ContractError("masked_log_softmax: no valid action");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      sum += std::exp(logits[i] - mx);
    }
  }
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size(), kNegInf);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      out[i] = logits[i] - lse;
    }
  }
  return out;
}

namespace {

Matrix masked_rows(const Matrix& logits, const std::vector<ActionMask>& masks) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto row = masked_log_softmax(
        std::span<const double>(logits.row(r).data(), static_cast<std::size_t>(logits.cols())),
        masks[static_cast<std::size_t>(r)]);
    std::copy(row.begin(), row.end(), out.row(r).data());
  }
  return out;
}

std::vector<ActionMask> forward_masks(const Environment& env, std::span<const State> states) {
  std::vector<ActionMask> masks;
  masks.reserve(states.size());
  for (const auto& s : states) {
    masks.push_back(env.valid_actions(s));
  }
  return masks;
}

std::vector<ActionMask> backward_masks(const Environment& env, std::span<const State> children) {
  std::vector<ActionMask> masks;
  masks.reserve(children.size());
  for (const auto& c : children) {
    masks.push_back(env.backward_actions(c));
  }
  return masks;
}

}  // namespace

Matrix forward_log_probs(const PolicyBundle& bundle, const Environment& env,
                         std::span<const State> states) {
  const auto masks = forward_masks(env, states);
  return masked_rows(bundle.forward.forward(encode_batch(env, states)), masks);
}

std::vector<double> forward_log_probs(const PolicyBundle& bundle, const Environment& env,
                                      const State& s) {
  Matrix lp = forward_log_probs(bundle, env, std::span<const State>(&s, 1));
  return {lp.data(), lp.data() + lp.size()};
}

Matrix backward_log_probs(const PolicyBundle& bundle, const Environment& env,
                          std::span<const State> children) {
  const auto masks = backward_masks(env, children);
  const auto a = static_cast<Eigen::Index>(env.action_count());
  if (!bundle.backward) {
    Matrix out = Matrix::Constant(static_cast<Eigen::Index>(children.size()), a, kNegInf);
    for (std::size_t r = 0; r < children.size(); ++r) {
      const auto& m = masks[r];
      const auto n = std::count(m.begin(), m.end(), std::uint8_t{1});
      for (Eigen::Index c = 0; c < a; ++c) {
        if (m[static_cast<std::size_t>(c)]) {
          out(static_cast<Eigen::Index>(r), c) = -std::log(static_cast<double>(n));
        }
      }
    }
    return out;
  }
  return masked_rows(bundle.backward->forward(encode_batch(env, children)), masks);
}

double backward_log_prob(const PolicyBundle& bundle, const Environment& env, const State& child,
                         Action action) {
  if (child.final) {
    throw ContractError("backward_log_prob: pi_B(x|s_f) is substituted by the reward, not modelled");
  }
  const auto mask = env.backward_actions(child);
  if (action < 0 || action >= env.action_count() || !mask[static_cast<std::size_t>(action)]) {
    throw ContractError("backward_log_prob: action " + std::to_string(action) +
                        " is not an edge into " + describe_state(child));
  }
  Matrix lp = backward_log_probs(bundle, env, std::span<const State>(&child, 1));
  return lp(0, action);
}

std::vector<double> head_values(const PolicyBundle& bundle, HeadId id, const Environment& env,
                                std::span<const State> states) {
  Matrix out = bundle.net(id).forward(encode_batch(env, states));
  return {out.data(), out.data() + out.size()};
}

double terminal_log_mass(const PolicyBundle& bundle, double reward) {
  if (!(reward > 0.0)) {
    throw ContractError("terminal_log_mass: reward must be positive");
  }
  return std::log(reward) - (bundle.config.use_logz ? bundle.log_z : 0.0);
}

double edge_reward_forward(const PolicyBundle& bundle, const Environment& env, const State& s,
                           Action a, const State& child, std::optional<double> terminal_reward) {
  const double log_pf = forward_log_probs(bundle, env, s)[static_cast<std::size_t>(a)];
  if (child.final) {
    if (!terminal_reward) {
      throw ContractError("edge_reward_forward: terminal edge needs the terminal reward");
    }
    return terminal_log_mass(bundle, *terminal_reward) - log_pf;
  }
  if (terminal_reward) {
    throw ContractError("edge_reward_forward: terminal reward given for an intermediate edge");
  }
  return backward_log_prob(bundle, env, child, a) - log_pf;
}

double edge_reward_backward(const PolicyBundle& bundle, const Environment& env, const State& s,
                            Action a, const State& child) {
  const double log_pf = forward_log_probs(bundle, env, s)[static_cast<std::size_t>(a)];
  return log_pf - backward_log_prob(bundle, env, child, a);
}

namespace {

// d log softmax_a / d logits = onehot(a) - p over valid entries.
void accumulate_logprob_grad(const Approximator& net, const Environment& env,
                             std::span<const State> states, std::span<const Action> actions,
                             std::span<const double> coeffs, const std::vector<ActionMask>& masks,
                             std::vector<double>& grad) {
  if (states.size() != actions.size() || states.size() != coeffs.size()) {
    throw ContractError("accumulate_logprob_grad: states, actions and coeffs differ in length");
  }
  if (grad.size() != net.size()) {
    throw ContractError("accumulate_logprob_grad: gradient buffer size mismatch");
  }
  if (states.empty()) {
    return;
  }
  Tape tape;
  const Matrix logits = net.forward(encode_batch(env, states), tape);
  const Matrix logp = masked_rows(logits, masks);
  Matrix upstream = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double c = coeffs[static_cast<std::size_t>(r)];
    const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(r)]);
    if (!masks[static_cast<std::size_t>(r)][static_cast<std::size_t>(a)]) {
      throw ContractError("accumulate_logprob_grad: action " + std::to_string(a) + " is masked at " +
                          describe_state(states[static_cast<std::size_t>(r)]));
    }
    if (c == 0.0) {
      continue;
    }
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      if (masks[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)]) {
        upstream(r, k) = -c * std::exp(logp(r, k));
      }
    }
    upstream(r, a) += c;
  }
  GradAccumulator acc(net.size());
  net.backward(tape, upstream, acc);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] += acc.grads[i];
  }
}

}  // namespace

void accumulate_forward_logprob_grad(const PolicyBundle& bundle, const Environment& env,
                                     std::span<const State> states, std::span<const Action> actions,
                                     std::span<const double> coeffs, std::vector<double>& grad) {
  accumulate_logprob_grad(bundle.forward, env, states, actions, coeffs, forward_masks(env, states),
                          grad);
}

void accumulate_backward_logprob_grad(const PolicyBundle& bundle, const Environment& env,
                                      std::span<const State> children, std::span<const Action> actions,
                                      std::span<const double> coeffs, std::vector<double>& grad) {
  if (!bundle.backward) {
    // Uniform pi_B has no parameters.
    return;
  }
  accumulate_logprob_grad(*bundle.backward, env, children, actions, coeffs,
                          backward_masks(env, children), grad);
}

void accumulate_head_grad(const PolicyBundle& bundle, HeadId id, const Environment& env,
                          std::span<const State> states, std::span<const double> coeffs,
                          std::vector<double>& grad) {
  const Approximator& net = bundle.net(id);
  if (net.output_width() != 1) {
    throw ContractError(std::string("accumulate_head_grad: head '") + head_name(id) + "' is not scalar");
  }
  if (states.size() != coeffs.size()) {
    throw ContractError("accumulate_head_grad: states and coeffs differ in length");
  }
  if (states.empty()) {
    return;
  }
  Tape tape;
  net.forward(encode_batch(env, states), tape);
  Matrix upstream = Eigen::Map<const Matrix>(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()), 1);
  GradAccumulator acc(net.size());
  net.backward(tape, upstream, acc);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] += acc.grads[i];
  }
}

}  // namespace subflow
