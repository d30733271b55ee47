#include "subflow/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(std::span<const double> xs) {
  double mx = kNegInf;
  for (double x : xs) {
    mx = std::max(mx, x);
  }
  if (mx == kNegInf) {
    return kNegInf;
  }
  double s = 0.0;
  for (double x : xs) {
    s += std::exp(x - mx);
  }
  return mx + std::log(s);
}

// Runs body(s) for every state of level h, in parallel when asked. Each body
// writes only to its own state's slot, so results do not depend on `exec`.
template <class Body>
void sweep_level(const StateGraph& g, int h, Exec exec, Body body) {
  const int lo = g.level_begin[static_cast<std::size_t>(h)];
  const int hi = g.level_begin[static_cast<std::size_t>(h) + 1];
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(static)
    for (int s = lo; s < hi; ++s) {
      body(s);
    }
  } else {
    for (int s = lo; s < hi; ++s) {
      body(s);
    }
  }
}

template <class Body>
void sweep_all(const StateGraph& g, Exec exec, Body body) {
  const int n = g.size();
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(static)
    for (int s = 0; s < n; ++s) {
      body(s);
    }
  } else {
    for (int s = 0; s < n; ++s) {
      body(s);
    }
  }
}

LogTable masked_table(const StateGraph& g, bool forward) {
  LogTable t(g.states.size(), std::vector<double>(static_cast<std::size_t>(g.action_count), kNegInf));
  for (int s = 0; s < g.size(); ++s) {
    const auto& edges = forward ? g.out[static_cast<std::size_t>(s)] : g.in[static_cast<std::size_t>(s)];
    for (const auto& e : edges) {
      t[static_cast<std::size_t>(s)][static_cast<std::size_t>(e.action)] = 0.0;
    }
  }
  return t;
}

void normalize_rows(LogTable& t) {
  for (auto& row : t) {
    const double lse = log_sum_exp(row);
    if (lse == kNegInf) {
      continue;
    }
    for (double& v : row) {
      if (v != kNegInf) {
        v -= lse;
      }
    }
  }
}

LogTable random_table(const StateGraph& g, bool forward, std::mt19937_64& gen, double scale) {
  LogTable t = masked_table(g, forward);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& row : t) {
    for (double& v : row) {
      if (v != kNegInf) {
        v = n(gen);
      }
    }
  }
  normalize_rows(t);
  return t;
}

double prob(double logp) { return logp == kNegInf ? 0.0 : std::exp(logp); }

}  // namespace

StateGraph StateGraph::build(const Environment& env, std::uint64_t cap) {
  StateGraph g;
  g.states = env.enumerate_states(cap);
  g.action_count = env.action_count();
  const auto n = g.states.size();
  for (std::size_t i = 0; i < n; ++i) {
    g.index.emplace(env.key(g.states[i]), static_cast<int>(i));
  }
  g.out.resize(n);
  g.in.resize(n);
  g.log_reward.assign(n, kNegInf);
  const Action stop = env.terminate_action();
  int level = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const State& s = g.states[i];
    while (level < s.step) {
      g.level_begin.push_back(static_cast<int>(i));
      ++level;
    }
    const auto mask = env.valid_actions(s);
    for (Action a = 0; a < g.action_count; ++a) {
      if (!mask[static_cast<std::size_t>(a)]) {
        continue;
      }
      if (a == stop) {
        g.out[i].push_back({a, kFinal});
        g.terminals.push_back(static_cast<int>(i));
        g.log_reward[i] = std::log(env.reward(s));
        continue;
      }
      const State child = env.step(s, a);
      const int c = g.index.at(env.key(child));
      if (g.states[static_cast<std::size_t>(c)].step != s.step + 1) {
        throw CapabilityError(env.name() + ": non-final states are not graded; level sweeps need them to be");
      }
      g.out[i].push_back({a, c});
      g.in[static_cast<std::size_t>(c)].push_back({a, static_cast<int>(i)});
    }
  }
  g.level_begin.push_back(static_cast<int>(n));
  return g;
}

int StateGraph::index_of(const Environment& env, const State& s) const {
  const auto it = index.find(env.key(s));
  if (s.final || it == index.end()) {
    throw ContractError("StateGraph: " + describe_state(s) + " is not a non-final state of the graph");
  }
  return it->second;
}

LogTable uniform_forward(const StateGraph& g) {
  LogTable t = masked_table(g, true);
  normalize_rows(t);
  return t;
}

LogTable uniform_backward(const StateGraph& g) {
  LogTable t = masked_table(g, false);
  normalize_rows(t);
  return t;
}

LogTable random_forward(const StateGraph& g, std::mt19937_64& gen, double scale) {
  return random_table(g, true, gen, scale);
}

LogTable random_backward(const StateGraph& g, std::mt19937_64& gen, double scale) {
  return random_table(g, false, gen, scale);
}

PolicyTables tables_from_bundle(const StateGraph& g, const Environment& env,
                                const PolicyBundle& bundle) {
  PolicyTables t;
  const Matrix lpf = forward_log_probs(bundle, env, g.states);
  t.log_pf.resize(g.states.size());
  for (std::size_t s = 0; s < g.states.size(); ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    t.log_pf[s].assign(lpf.row(r).data(), lpf.row(r).data() + lpf.cols());
  }
  // s0 has no parents; its row stays -inf.
  std::vector<State> children(g.states.begin() + 1, g.states.end());
  const Matrix lpb = backward_log_probs(bundle, env, children);
  t.log_pb.assign(g.states.size(), std::vector<double>(static_cast<std::size_t>(g.action_count), kNegInf));
  for (std::size_t s = 1; s < g.states.size(); ++s) {
    const auto r = static_cast<Eigen::Index>(s - 1);
    t.log_pb[s].assign(lpb.row(r).data(), lpb.row(r).data() + lpb.cols());
  }
  return t;
}

FlowTable dp_true_flow(const StateGraph& g, const PolicyTables& t, Exec exec) {
  FlowTable f;
  f.log_flow.assign(g.states.size(), kNegInf);
  for (int h = g.levels() - 1; h >= 0; --h) {
    sweep_level(g, h, exec, [&](int s) {
      std::vector<double> terms;
      for (const auto& e : g.out[static_cast<std::size_t>(s)]) {
        if (e.other == StateGraph::kFinal) {
          terms.push_back(g.log_reward[static_cast<std::size_t>(s)]);
        } else {
          terms.push_back(t.log_pb[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)] +
                          f.log_flow[static_cast<std::size_t>(e.other)]);
        }
      }
      f.log_flow[static_cast<std::size_t>(s)] = log_sum_exp(terms);
    });
  }
  f.log_z_star = f.log_flow[0];
  return f;
}

LogTable optimal_forward(const StateGraph& g, const PolicyTables& t, const FlowTable& flow) {
  LogTable pf = masked_table(g, true);
  for (int s = 0; s < g.size(); ++s) {
    const auto su = static_cast<std::size_t>(s);
    for (const auto& e : g.out[su]) {
      const double num = e.other == StateGraph::kFinal
                             ? g.log_reward[su]
                             : t.log_pb[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)] +
                                   flow.log_flow[static_cast<std::size_t>(e.other)];
      pf[su][static_cast<std::size_t>(e.action)] = num - flow.log_flow[su];
    }
  }
  return pf;
}

std::vector<double> dp_log_visit(const StateGraph& g, const PolicyTables& t, Exec exec) {
  std::vector<double> v(g.states.size(), kNegInf);
  v[0] = 0.0;
  for (int h = 1; h < g.levels(); ++h) {
    sweep_level(g, h, exec, [&](int s) {
      std::vector<double> terms;
      for (const auto& e : g.in[static_cast<std::size_t>(s)]) {
        terms.push_back(v[static_cast<std::size_t>(e.other)] +
                        t.log_pf[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)]);
      }
      v[static_cast<std::size_t>(s)] = log_sum_exp(terms);
    });
  }
  return v;
}

DistTable dp_forward_terminal_dist(const StateGraph& g, const PolicyTables& t, Exec exec) {
  const auto visit = dp_log_visit(g, t, exec);
  DistTable d;
  d.terminals = g.terminals;
  for (int x : g.terminals) {
    const auto xu = static_cast<std::size_t>(x);
    double lp = kNegInf;
    for (const auto& e : g.out[xu]) {
      if (e.other == StateGraph::kFinal) {
        lp = t.log_pf[xu][static_cast<std::size_t>(e.action)];
      }
    }
    d.prob.push_back(std::exp(visit[xu] + lp));
  }
  return d;
}

DistTable target_dist(const StateGraph& g) {
  DistTable d;
  d.terminals = g.terminals;
  std::vector<double> lr;
  for (int x : g.terminals) {
    lr.push_back(g.log_reward[static_cast<std::size_t>(x)]);
  }
  const double lz = log_sum_exp(lr);
  for (double v : lr) {
    d.prob.push_back(std::exp(v - lz));
  }
  return d;
}

std::vector<double> terminal_rewards(const StateGraph& g, const DistTable& d) {
  std::vector<double> r;
  for (int x : d.terminals) {
    r.push_back(std::exp(g.log_reward[static_cast<std::size_t>(x)]));
  }
  return r;
}

std::vector<double> dp_v_dagger(const StateGraph& g, const PolicyTables& t, double log_z, Exec exec) {
  std::vector<double> v(g.states.size(), 0.0);
  for (int h = g.levels() - 1; h >= 0; --h) {
    sweep_level(g, h, exec, [&](int s) {
      const auto su = static_cast<std::size_t>(s);
      double acc = 0.0;
      for (const auto& e : g.out[su]) {
        const double lpf = t.log_pf[su][static_cast<std::size_t>(e.action)];
        const double p = prob(lpf);
        if (p == 0.0) {
          continue;
        }
        const double next = e.other == StateGraph::kFinal
                                ? g.log_reward[su] - log_z
                                : t.log_pb[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)] +
                                      v[static_cast<std::size_t>(e.other)];
        acc += p * (next - lpf);
      }
      v[su] = acc;
    });
  }
  return v;
}

std::vector<double> dp_w_dagger(const StateGraph& g, const PolicyTables& t, double log_z_s0, Exec exec) {
  std::vector<double> w(g.states.size(), 0.0);
  w[0] = log_z_s0;
  for (int h = 1; h < g.levels(); ++h) {
    sweep_level(g, h, exec, [&](int s) {
      const auto su = static_cast<std::size_t>(s);
      double acc = 0.0;
      for (const auto& e : g.in[su]) {
        const double lpb = t.log_pb[su][static_cast<std::size_t>(e.action)];
        const double p = prob(lpb);
        if (p == 0.0) {
          continue;
        }
        const double lpf = t.log_pf[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)];
        acc += p * (lpf - lpb + w[static_cast<std::size_t>(e.other)]);
      }
      w[su] = acc;
    });
  }
  return w;
}

std::vector<double> dp_forward_log_flow(const StateGraph& g, const PolicyTables& t, double log_z,
                                        Exec exec) {
  auto v = dp_log_visit(g, t, exec);
  for (double& x : v) {
    x += log_z;
  }
  return v;
}

double dp_kl_forward(const StateGraph& g, const PolicyTables& t) {
  const FlowTable f = dp_true_flow(g, t, Exec::kSerial);
  return f.log_z_star - dp_v_dagger(g, t, 0.0, Exec::kSerial)[0];
}

std::vector<double> terminal_values(const StateGraph& g, const PolicyTables& t,
                                    std::span<const double> h) {
  std::vector<double> out;
  for (int x : g.terminals) {
    const auto xu = static_cast<std::size_t>(x);
    for (const auto& e : g.out[xu]) {
      if (e.other == StateGraph::kFinal) {
        out.push_back(h[xu] + t.log_pf[xu][static_cast<std::size_t>(e.action)]);
      }
    }
  }
  return out;
}

namespace {

void require_aligned(const DistTable& p, const DistTable& q) {
  if (p.terminals != q.terminals || p.prob.size() != q.prob.size()) {
    throw ContractError("metric: distributions have different supports");
  }
}

}  // namespace

double metric_tv(const DistTable& p, const DistTable& q) {
  require_aligned(p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.prob.size(); ++i) {
    s += std::abs(p.prob[i] - q.prob[i]);
  }
  return 0.5 * s;
}

double metric_jsd(const DistTable& p, const DistTable& q) {
  require_aligned(p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.prob.size(); ++i) {
    const double m = 0.5 * (p.prob[i] + q.prob[i]);
    if (p.prob[i] > 0.0) {
      s += 0.5 * p.prob[i] * std::log(p.prob[i] / m);
    }
    if (q.prob[i] > 0.0) {
      s += 0.5 * q.prob[i] * std::log(q.prob[i] / m);
    }
  }
  return std::max(s, 0.0);
}

double metric_mode_accuracy(const DistTable& p_forward, const DistTable& p_star,
                            std::span<const double> rewards) {
  require_aligned(p_forward, p_star);
  if (rewards.size() != p_forward.prob.size()) {
    throw ContractError("metric_mode_accuracy: rewards not aligned with the support");
  }
  double ef = 0.0;
  double es = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    ef += p_forward.prob[i] * rewards[i];
    es += p_star.prob[i] * rewards[i];
  }
  return std::min(ef / es, 1.0);
}

// ---- enumeration ------------------------------------------------------------

double EnumeratedTrajectory::log_prob_forward() const {
  double s = 0.0;
  for (double v : log_pf) {
    s += v;
  }
  return s;
}

double EnumeratedTrajectory::log_prob_backward() const {
  double s = 0.0;
  for (double v : log_pb) {
    s += v;
  }
  return s;
}

double count_trajectories(const StateGraph& g) {
  std::vector<double> n(g.states.size(), 0.0);
  for (int s = g.size() - 1; s >= 0; --s) {
    double c = 0.0;
    for (const auto& e : g.out[static_cast<std::size_t>(s)]) {
      c += e.other == StateGraph::kFinal ? 1.0 : n[static_cast<std::size_t>(e.other)];
    }
    n[static_cast<std::size_t>(s)] = c;
  }
  return n[0];
}

std::vector<EnumeratedTrajectory> enumerate_trajectories(const StateGraph& g, const PolicyTables& t,
                                                         std::uint64_t cap) {
  const double count = count_trajectories(g);
  if (count > static_cast<double>(cap)) {
    std::ostringstream msg;
    msg << "enumerate_trajectories: " << count << " trajectories exceed the cap of " << cap;
    throw CapabilityError(msg.str());
  }
  std::vector<EnumeratedTrajectory> out;
  out.reserve(static_cast<std::size_t>(count));
  EnumeratedTrajectory cur;
  cur.states.push_back(0);
  auto dfs = [&](auto&& self, int s) -> void {
    const auto su = static_cast<std::size_t>(s);
    for (const auto& e : g.out[su]) {
      const double lpf = t.log_pf[su][static_cast<std::size_t>(e.action)];
      cur.actions.push_back(e.action);
      cur.log_pf.push_back(lpf);
      if (e.other == StateGraph::kFinal) {
        cur.log_reward = g.log_reward[su];
        out.push_back(cur);
      } else {
        cur.log_pb.push_back(t.log_pb[static_cast<std::size_t>(e.other)][static_cast<std::size_t>(e.action)]);
        cur.states.push_back(e.other);
        self(self, e.other);
        cur.states.pop_back();
        cur.log_pb.pop_back();
      }
      cur.actions.pop_back();
      cur.log_pf.pop_back();
    }
  };
  dfs(dfs, 0);
  return out;
}

Trajectory to_trajectory(const StateGraph& g, const Environment& env, const EnumeratedTrajectory& e) {
  Trajectory t;
  for (int s : e.states) {
    t.states.push_back(g.states[static_cast<std::size_t>(s)]);
  }
  State f = env.final_state();
  f.step = static_cast<int>(e.states.size());
  t.states.push_back(std::move(f));
  t.actions = e.actions;
  t.log_pf = e.log_pf;
  t.log_pb = e.log_pb;
  t.log_pb.push_back(0.0);
  t.log_reward = e.log_reward;
  t.terminal_reward = std::exp(e.log_reward);
  return t;
}

namespace {

// Weighted average of a per-visit quantity, accumulated per state.
struct Accum {
  std::vector<double> num;
  std::vector<double> den;
  explicit Accum(std::size_t n) : num(n, 0.0), den(n, 0.0) {}
};

}  // namespace

std::vector<double> enum_log_true_flow(const StateGraph& g, std::span<const EnumeratedTrajectory> all) {
  std::vector<double> f(g.states.size(), 0.0);
  for (const auto& e : all) {
    const double w = std::exp(e.log_prob_backward() + e.log_reward);
    for (int s : e.states) {
      f[static_cast<std::size_t>(s)] += w;
    }
  }
  for (double& v : f) {
    v = std::log(v);
  }
  return f;
}

DistTable enum_terminal_dist(const StateGraph& g, std::span<const EnumeratedTrajectory> all) {
  DistTable d;
  d.terminals = g.terminals;
  std::vector<double> by_state(g.states.size(), 0.0);
  for (const auto& e : all) {
    by_state[static_cast<std::size_t>(e.states.back())] += std::exp(e.log_prob_forward());
  }
  for (int x : g.terminals) {
    d.prob.push_back(by_state[static_cast<std::size_t>(x)]);
  }
  return d;
}

std::vector<double> enum_v_dagger(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                  double log_z) {
  Accum acc(g.states.size());
  for (const auto& e : all) {
    const double p = std::exp(e.log_prob_forward());
    // suffix sums of log pi~_B - log pi_F
    const std::size_t len = e.actions.size();
    double tail = e.log_reward - log_z - e.log_pf[len - 1];
    for (std::size_t k = len; k-- > 0;) {
      if (k + 1 < len) {
        tail += e.log_pb[k] - e.log_pf[k];
      }
      const auto s = static_cast<std::size_t>(e.states[k]);
      acc.num[s] += p * tail;
      acc.den[s] += p;
    }
  }
  std::vector<double> v(g.states.size());
  for (std::size_t s = 0; s < v.size(); ++s) {
    v[s] = acc.num[s] / acc.den[s];
  }
  return v;
}

std::vector<double> enum_w_dagger(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                  double log_z_s0) {
  Accum acc(g.states.size());
  for (const auto& e : all) {
    const double w = std::exp(e.log_prob_backward() + e.log_reward);
    double head = 0.0;
    for (std::size_t k = 0; k < e.states.size(); ++k) {
      if (k > 0) {
        head += e.log_pf[k - 1] - e.log_pb[k - 1];
      }
      const auto s = static_cast<std::size_t>(e.states[k]);
      acc.num[s] += w * head;
      acc.den[s] += w;
    }
  }
  std::vector<double> out(g.states.size());
  for (std::size_t s = 0; s < out.size(); ++s) {
    out[s] = log_z_s0 + acc.num[s] / acc.den[s];
  }
  return out;
}

double enum_kl_forward(std::span<const EnumeratedTrajectory> all, double log_z_star) {
  double kl = 0.0;
  for (const auto& e : all) {
    const double lpf = e.log_prob_forward();
    kl += std::exp(lpf) * (lpf - (e.log_prob_backward() + e.log_reward - log_z_star));
  }
  return kl;
}

std::vector<double> enum_suffix_kl(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                                   std::span<const double> log_true_flow) {
  // P_F(suffix|s) = prod pi_F over the suffix; P_B(suffix|s) = R(x) prod pi_B / F*(s).
  Accum acc(g.states.size());
  for (const auto& e : all) {
    const double p = std::exp(e.log_prob_forward());
    const std::size_t len = e.actions.size();
    double lpf_tail = 0.0;
    double lpb_tail = e.log_reward;
    for (std::size_t k = len; k-- > 0;) {
      lpf_tail += e.log_pf[k];
      if (k + 1 < len) {
        lpb_tail += e.log_pb[k];
      }
      const auto s = static_cast<std::size_t>(e.states[k]);
      acc.num[s] += p * (lpf_tail - (lpb_tail - log_true_flow[s]));
      acc.den[s] += p;
    }
  }
  std::vector<double> kl(g.states.size());
  for (std::size_t s = 0; s < kl.size(); ++s) {
    kl[s] = acc.num[s] / acc.den[s];
  }
  return kl;
}

std::vector<double> enum_prefix_kl(const StateGraph& g, std::span<const EnumeratedTrajectory> all) {
  // Weights P_B(tau|x) R(x) give the backward prefix measure once normalized
  // per state. P_F(prefix|s) = prod pi_F / visit(s).
  std::vector<double> visit(g.states.size(), 0.0);
  for (const auto& e : all) {
    const double p = std::exp(e.log_prob_forward());
    for (int s : e.states) {
      visit[static_cast<std::size_t>(s)] += p;
    }
  }
  std::vector<double> flow(g.states.size(), 0.0);
  for (const auto& e : all) {
    const double w = std::exp(e.log_prob_backward() + e.log_reward);
    for (int s : e.states) {
      flow[static_cast<std::size_t>(s)] += w;
    }
  }
  Accum acc(g.states.size());
  for (const auto& e : all) {
    const double w = std::exp(e.log_prob_backward() + e.log_reward);
    double lpf = 0.0;
    double lpb = 0.0;
    for (std::size_t k = 0; k < e.states.size(); ++k) {
      if (k > 0) {
        lpf += e.log_pf[k - 1];
        lpb += e.log_pb[k - 1];
      }
      const auto s = static_cast<std::size_t>(e.states[k]);
      acc.num[s] += w * (lpb - (lpf - std::log(visit[s])));
      acc.den[s] += w;
    }
  }
  std::vector<double> kl(g.states.size());
  for (std::size_t s = 0; s < kl.size(); ++s) {
    kl[s] = acc.num[s] / acc.den[s];
  }
  return kl;
}

// ---- exact balance checks ---------------------------------------------------

namespace {

void track_worst(ExpectationTable& t) {
  t.max_abs = 0.0;
  for (std::size_t s = 0; s < t.by_state.size(); ++s) {
    for (std::size_t l = 0; l < t.by_state[s].size(); ++l) {
      const double a = std::abs(t.by_state[s][l]);
      if (!(a <= t.max_abs)) {
        t.max_abs = a;
        t.worst_state = static_cast<int>(s);
        t.worst_span = static_cast<int>(l) + 1;
      }
    }
  }
}

}  // namespace

ExpectationTable forward_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                           std::span<const double> h, double log_z, Exec exec) {
  const int spans = g.levels();
  const auto n = g.states.size();
  std::vector<double> prev(n, 0.0);  // A_{l-1}
  ExpectationTable out;
  out.by_state.assign(n, std::vector<double>(static_cast<std::size_t>(spans), 0.0));
  for (int l = 1; l <= spans; ++l) {
    std::vector<double> cur(n, 0.0);
    sweep_all(g, exec, [&](int s) {
      const auto su = static_cast<std::size_t>(s);
      double acc = 0.0;
      for (const auto& e : g.out[su]) {
        const double lpf = t.log_pf[su][static_cast<std::size_t>(e.action)];
        const double p = prob(lpf);
        if (p == 0.0) {
          continue;
        }
        double term;
        double rest = 0.0;
        if (e.other == StateGraph::kFinal) {
          term = lpf + h[su] - (g.log_reward[su] - log_z);
        } else {
          const auto c = static_cast<std::size_t>(e.other);
          term = lpf + h[su] - t.log_pb[c][static_cast<std::size_t>(e.action)] - h[c];
          rest = prev[c];
        }
        acc += p * (term + rest);
      }
      cur[su] = acc;
    });
    for (std::size_t s = 0; s < n; ++s) {
      out.by_state[s][static_cast<std::size_t>(l - 1)] = cur[s];
    }
    prev.swap(cur);
  }
  track_worst(out);
  return out;
}

LogTable position_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                    const ExpectationTable& cond) {
  const auto visit = dp_log_visit(g, t, Exec::kSerial);
  const int spans = g.levels();
  LogTable e(static_cast<std::size_t>(spans) + 1, std::vector<double>(static_cast<std::size_t>(spans) + 1, 0.0));
  for (int i = 0; i < g.levels(); ++i) {
    for (int s = g.level_begin[static_cast<std::size_t>(i)]; s < g.level_begin[static_cast<std::size_t>(i) + 1]; ++s) {
      const double p = std::exp(visit[static_cast<std::size_t>(s)]);
      for (int j = i + 1; j <= spans; ++j) {
        e[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
            p * cond.by_state[static_cast<std::size_t>(s)][static_cast<std::size_t>(j - i - 1)];
      }
    }
  }
  return e;
}

ExpectationTable backward_pair_expectations(const StateGraph& g, const PolicyTables& t,
                                            std::span<const double> w, bool with_terminal, Exec exec) {
  const int spans = g.levels();
  const auto n = g.states.size();
  ExpectationTable out;
  out.by_state.assign(n, std::vector<double>(static_cast<std::size_t>(with_terminal ? 2 * spans : spans), 0.0));
  std::vector<double> prev(n, 0.0);  // B_{l-1}
  for (int l = 1; l <= spans; ++l) {
    if (with_terminal) {
      // spans ending at s_f: terminal edge term plus B_{l-1}(x)
      for (int x : g.terminals) {
        const auto xu = static_cast<std::size_t>(x);
        for (const auto& e : g.out[xu]) {
          if (e.other == StateGraph::kFinal) {
            const double term = t.log_pf[xu][static_cast<std::size_t>(e.action)] + w[xu] - g.log_reward[xu];
            out.by_state[xu][static_cast<std::size_t>(spans + l - 1)] = term + prev[xu];
          }
        }
      }
    }
    if (l == spans) {
      break;
    }
    std::vector<double> cur(n, 0.0);
    sweep_all(g, exec, [&](int s) {
      const auto su = static_cast<std::size_t>(s);
      double acc = 0.0;
      for (const auto& e : g.in[su]) {
        const double lpb = t.log_pb[su][static_cast<std::size_t>(e.action)];
        const double p = prob(lpb);
        if (p == 0.0) {
          continue;
        }
        const auto par = static_cast<std::size_t>(e.other);
        const double term = t.log_pf[par][static_cast<std::size_t>(e.action)] + w[par] - lpb - w[su];
        acc += p * (term + prev[par]);
      }
      cur[su] = acc;
    });
    for (std::size_t s = 0; s < n; ++s) {
      out.by_state[s][static_cast<std::size_t>(l - 1)] = cur[s];
    }
    prev.swap(cur);
  }
  track_worst(out);
  return out;
}

double max_pointwise_subtb(const StateGraph& g, std::span<const EnumeratedTrajectory> all,
                           std::span<const double> log_flow) {
  (void)g;
  double worst = 0.0;
  for (const auto& e : all) {
    const std::size_t len = e.actions.size();
    std::vector<double> terms(len);
    for (std::size_t k = 0; k < len; ++k) {
      const double lhs = e.log_pf[k] + log_flow[static_cast<std::size_t>(e.states[k])];
      const double rhs = k + 1 == len ? e.log_reward
                                      : e.log_pb[k] + log_flow[static_cast<std::size_t>(e.states[k + 1])];
      terms[k] = lhs - rhs;
    }
    for (std::size_t i = 0; i < len; ++i) {
      double d = 0.0;
      for (std::size_t j = i; j < len; ++j) {
        d += terms[j];
        worst = std::max(worst, std::abs(d));
      }
    }
  }
  return worst;
}

}  // namespace subflow
