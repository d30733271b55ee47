#include "subflow/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "subflow/errors.hpp"
#include "subflow/rng.hpp"

namespace subflow {

namespace {

KeyedRng stream_for(const BatchKey& key, std::size_t k) {
  return KeyedRng(key.seed, key.iteration, (key.stream << 40) ^ static_cast<std::uint64_t>(k));
}

// Inverse-CDF draw from a masked log-probability row.
Action draw(const double* logp, int n, double u) {
  double cum = 0.0;
  Action last = -1;
  for (int a = 0; a < n; ++a) {
    if (!std::isfinite(logp[a])) {
      continue;
    }
    cum += std::exp(logp[a]);
    last = a;
    if (u < cum) {
      return a;
    }
  }
  return last;
}

Action draw_uniform(const ActionMask& mask, double u) {
  const int n = static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  int pick = std::min(static_cast<int>(u * n), n - 1);
  for (std::size_t a = 0; a < mask.size(); ++a) {
    if (mask[a] && pick-- == 0) {
      return static_cast<Action>(a);
    }
  }
  throw ContractError("draw_uniform: empty mask");
}

std::vector<Trajectory> rollout(const PolicyBundle& bundle, const Environment& env, int batch,
                                double alpha, const BatchKey& key) {
  if (batch < 1) {
    throw ContractError("sampler: batch size must be >= 1");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("sampler: alpha must lie in [0, 1]");
  }
  const auto n = static_cast<std::size_t>(batch);
  std::vector<Trajectory> out(n);
  std::vector<KeyedRng> rngs;
  rngs.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    rngs.push_back(stream_for(key, k));
    out[k].states.push_back(env.initial());
  }
  std::vector<std::size_t> active(n);
  for (std::size_t k = 0; k < n; ++k) {
    active[k] = k;
  }
  const int limit = env.horizon_bound() + 1;
  const int width = env.action_count();
  for (int t = 0; !active.empty(); ++t) {
    if (t >= limit) {
      throw ContractError(env.name() + ": trajectory exceeded horizon bound without terminating");
    }
    std::vector<State> current;
    current.reserve(active.size());
    for (auto k : active) {
      current.push_back(out[k].states.back());
    }
    const Matrix logp = forward_log_probs(bundle, env, current);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(active.size()); ++r) {
      const auto k = active[static_cast<std::size_t>(r)];
      auto& rng = rngs[k];
      const double* row = logp.row(r).data();
      Action a;
      if (alpha > 0.0 && rng.uniform() < alpha) {
        a = draw_uniform(env.valid_actions(current[static_cast<std::size_t>(r)]), rng.uniform());
      } else {
        a = draw(row, width, rng.uniform());
      }
      Trajectory& tr = out[k];
      tr.actions.push_back(a);
      tr.log_pf.push_back(row[a]);
      tr.states.push_back(env.step(current[static_cast<std::size_t>(r)], a));
    }
    std::vector<std::size_t> next;
    for (auto k : active) {
      if (!out[k].states.back().final) {
        next.push_back(k);
      }
    }
    active.swap(next);
  }
  for (auto& tr : out) {
    tr.terminal_reward = env.reward(tr.terminal());
    tr.log_reward = std::log(tr.terminal_reward);
  }
  refresh_log_probs(bundle, env, out);
  return out;
}

}  // namespace

double decay_alpha(SamplerConfig& cfg) {
  cfg.alpha *= cfg.alpha_decay;
  return cfg.alpha;
}

std::vector<Trajectory> sample_forward(const PolicyBundle& bundle, const Environment& env, int batch,
                                       const BatchKey& key) {
  return rollout(bundle, env, batch, 0.0, key);
}

std::vector<Trajectory> sample_offline(const PolicyBundle& bundle, const Environment& env, int batch,
                                       double alpha, const BatchKey& key) {
  return rollout(bundle, env, batch, alpha, key);
}

std::vector<Trajectory> sample_backward(const PolicyBundle& bundle, const Environment& env,
                                        std::span<const State> terminals, const BatchKey& key) {
  const std::size_t n = terminals.size();
  // Built in reverse, flipped at the end.
  std::vector<Trajectory> out(n);
  std::vector<KeyedRng> rngs;
  rngs.reserve(n);
  std::vector<std::size_t> active;
  const State s0 = env.initial();
  for (std::size_t k = 0; k < n; ++k) {
    if (terminals[k].final || !env.is_terminating(terminals[k])) {
      throw ContractError("sample_backward: " + describe_state(terminals[k]) +
                          " is not a terminating state");
    }
    rngs.push_back(stream_for(key, k));
    out[k].states.push_back(terminals[k]);
    if (!(terminals[k] == s0)) {
      active.push_back(k);
    }
  }
  const int limit = env.horizon_bound() + 1;
  const int width = env.action_count();
  for (int t = 0; !active.empty(); ++t) {
    if (t >= limit) {
      throw ContractError(env.name() + ": backward walk did not reach s0 within the horizon");
    }
    std::vector<State> current;
    current.reserve(active.size());
    for (auto k : active) {
      current.push_back(out[k].states.back());
    }
    const Matrix logp = backward_log_probs(bundle, env, current);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(active.size()); ++r) {
      const auto k = active[static_cast<std::size_t>(r)];
      const double* row = logp.row(r).data();
      const Action a = draw(row, width, rngs[k].uniform());
      Trajectory& tr = out[k];
      tr.actions.push_back(a);
      if (a < 0) {
        continue;
      }
      tr.log_pb.push_back(row[a]);
      State p = env.parent_via(current[static_cast<std::size_t>(r)], a);
      p.step = current[static_cast<std::size_t>(r)].step - 1;
      tr.states.push_back(std::move(p));
    }
    std::vector<std::size_t> next;
    for (auto k : active) {
      if (out[k].actions.back() < 0) {
        throw ContractError("sample_backward: a state on the walk from " +
                            describe_state(terminals[k]) + " has no parents but is not s0");
      }
      if (!(out[k].states.back() == s0)) {
        next.push_back(k);
      }
    }
    active.swap(next);
  }
  for (auto& tr : out) {
    std::reverse(tr.states.begin(), tr.states.end());
    std::reverse(tr.actions.begin(), tr.actions.end());
    for (std::size_t i = 0; i < tr.states.size(); ++i) {
      tr.states[i].step = static_cast<int>(i);
    }
    State f = env.final_state();
    f.step = static_cast<int>(tr.states.size());
    tr.states.push_back(std::move(f));
    tr.actions.push_back(env.terminate_action());
    tr.terminal_reward = env.reward(tr.terminal());
    tr.log_reward = std::log(tr.terminal_reward);
  }
  refresh_log_probs(bundle, env, out);
  return out;
}

void refresh_log_probs(const PolicyBundle& bundle, const Environment& env,
                       std::span<Trajectory> batch) {
  std::vector<State> parents;
  std::vector<State> children;
  for (const auto& tr : batch) {
    for (int k = 0; k < tr.length(); ++k) {
      parents.push_back(tr.states[static_cast<std::size_t>(k)]);
      if (k + 1 < tr.length()) {
        children.push_back(tr.states[static_cast<std::size_t>(k + 1)]);
      }
    }
  }
  const Matrix lpf = forward_log_probs(bundle, env, parents);
  const Matrix lpb = backward_log_probs(bundle, env, children);
  Eigen::Index rf = 0;
  Eigen::Index rb = 0;
  for (auto& tr : batch) {
    const auto len = static_cast<std::size_t>(tr.length());
    tr.log_pf.assign(len, 0.0);
    tr.log_pb.assign(len, 0.0);
    for (std::size_t k = 0; k < len; ++k) {
      tr.log_pf[k] = lpf(rf++, tr.actions[k]);
      if (k + 1 < len) {
        tr.log_pb[k] = lpb(rb++, tr.actions[k]);
      }
    }
  }
}

void validate_trajectory(const Environment& env, const Trajectory& t) {
  const auto fail = [&](const std::string& why) {
    throw ContractError("invalid trajectory (" + env.name() + "): " + why);
  };
  if (t.states.size() != t.actions.size() + 1 || t.actions.empty()) {
    fail("states/actions length mismatch");
  }
  if (t.log_pf.size() != t.actions.size() || t.log_pb.size() != t.actions.size()) {
    fail("log-probability caches have the wrong length");
  }
  if (!(t.states.front() == env.initial())) {
    fail("does not start at s0");
  }
  if (!t.states.back().final) {
    fail("does not end at s_f");
  }
  for (std::size_t i = 0; i < t.actions.size(); ++i) {
    if (!(env.step(t.states[i], t.actions[i]) == t.states[i + 1])) {
      std::ostringstream msg;
      msg << "edge " << i << " does not follow from " << describe_state(t.states[i]) << " via action "
          << t.actions[i];
      fail(msg.str());
    }
  }
  if (t.terminal_reward != env.reward(t.terminal())) {
    fail("terminal_reward differs from reward(x)");
  }
}

}  // namespace subflow
