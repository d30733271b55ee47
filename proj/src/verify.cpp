#include "subflow/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "subflow/rng.hpp"

namespace subflow {

namespace {

constexpr double kOracleTol = 1e-10;
constexpr double kBalanceTol = 1e-9;
constexpr double kPointwiseTol = 1e-10;

std::vector<double> exp_all(std::span<const double> xs) {
  std::vector<double> out(xs.size());
  std::transform(xs.begin(), xs.end(), out.begin(), [](double v) { return std::exp(v); });
  return out;
}

CheckResult finish(std::string name, double value, double tol, std::string detail) {
  CheckResult r;
  r.name = std::move(name);
  r.value = value;
  r.tolerance = tol;
  r.pass = value < tol;
  r.detail = std::move(detail);
  return r;
}

}  // namespace

double table_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i]));
    if (!(e <= worst)) {
      worst = e;
    }
  }
  return worst;
}

PolicyTables random_tables(const StateGraph& g, std::uint64_t seed, int r) {
  std::uint64_t s = seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(r) + 1;
  std::mt19937_64 gen(splitmix64(s));
  PolicyTables t;
  t.log_pf = random_forward(g, gen);
  t.log_pb = random_backward(g, gen);
  return t;
}

std::string describe_pair(const Environment& env, const StateGraph& g, int state, int span) {
  (void)env;
  std::ostringstream out;
  if (state < 0) {
    return "none";
  }
  const State& s = g.states[static_cast<std::size_t>(state)];
  out << "pair (i=" << s.step << ", j=" << s.step + span << ") from state " << describe_state(s);
  return out.str();
}

CheckResult check_oracle(const StateGraph& g, const VerifyOptions& opt) {
  double worst = 0.0;
  std::string where = "ok";
  auto note = [&](double e, const std::string& what) {
    if (!(e <= worst)) {
      worst = e;
      where = what;
    }
  };
  for (int r = 0; r < opt.random_policies; ++r) {
    const PolicyTables t = random_tables(g, opt.seed, r);
    const auto all = enumerate_trajectories(g, t, opt.cap);
    const FlowTable flow = dp_true_flow(g, t);
    const auto enum_flow = enum_log_true_flow(g, all);
    note(table_error(exp_all(flow.log_flow), exp_all(enum_flow)), "F*");
    note(std::abs(std::exp(flow.log_z_star) - std::exp(enum_flow[0])) / std::exp(flow.log_z_star), "Z*");
    note(table_error(dp_forward_terminal_dist(g, t).prob, enum_terminal_dist(g, all).prob), "P_F(x)");
    note(table_error(dp_v_dagger(g, t, 0.0), enum_v_dagger(g, all, 0.0)), "V+");
    note(table_error(dp_v_dagger(g, t, flow.log_z_star), enum_v_dagger(g, all, flow.log_z_star)), "V+ with Z*");
    note(table_error(dp_w_dagger(g, t, flow.log_z_star), enum_w_dagger(g, all, flow.log_z_star)), "W+");
    note(std::abs(dp_kl_forward(g, t) - enum_kl_forward(all, flow.log_z_star)), "KL");
  }
  return finish("oracle self-consistency", worst, kOracleTol, "worst table: " + where);
}

CheckResult check_subeb_forward(const Environment& env, const StateGraph& g, const VerifyOptions& opt) {
  double worst = 0.0;
  std::string where = "none";
  for (int r = 0; r < opt.random_policies; ++r) {
    const PolicyTables t = random_tables(g, opt.seed, r);
    auto v = dp_v_dagger(g, t, 0.0);
    if (opt.perturb_state) {
      v.at(static_cast<std::size_t>(*opt.perturb_state)) += opt.perturbation;
    }
    const auto table = forward_pair_expectations(g, t, v, 0.0);
    if (!(table.max_abs <= worst)) {
      worst = table.max_abs;
      where = describe_pair(env, g, table.worst_state, table.worst_span);
    }
  }
  return finish("forward Sub-EB balance at V+", worst, kBalanceTol, "worst " + where);
}

CheckResult check_subtb(const StateGraph& g, const VerifyOptions& opt) {
  double pointwise = 0.0;
  double expectation = 0.0;
  for (int r = 0; r < opt.random_policies; ++r) {
    const PolicyTables t = random_tables(g, opt.seed, r);
    const FlowTable flow = dp_true_flow(g, t);
    const PolicyTables star{optimal_forward(g, t, flow), t.log_pb};
    const auto all_star = enumerate_trajectories(g, star, opt.cap);
    pointwise = std::max(pointwise, max_pointwise_subtb(g, all_star, flow.log_flow));

    const auto all = enumerate_trajectories(g, t, opt.cap);
    const auto kl = enum_suffix_kl(g, all, flow.log_flow);
    std::vector<double> h(flow.log_flow.size());
    for (std::size_t s = 0; s < h.size(); ++s) {
      h[s] = flow.log_flow[s] - kl[s];
    }
    expectation = std::max(expectation, forward_pair_expectations(g, t, h, 0.0).max_abs);
  }
  std::ostringstream d;
  d << "pointwise at optimum " << pointwise << ", expectations of log F* - KL " << expectation;
  CheckResult res = finish("Sub-TB balance", std::max(pointwise, expectation), kBalanceTol, d.str());
  res.pass = pointwise < kPointwiseTol && expectation < kBalanceTol;
  return res;
}

CheckResult check_subeb_backward(const StateGraph& g, const VerifyOptions& opt) {
  double interior = 0.0;
  double identity = 0.0;
  double terminal = 0.0;
  for (int r = 0; r < opt.random_policies; ++r) {
    const PolicyTables t = random_tables(g, opt.seed, r);
    const FlowTable flow = dp_true_flow(g, t);
    const auto w = dp_w_dagger(g, t, flow.log_z_star);
    interior = std::max(interior, backward_pair_expectations(g, t, w, false).max_abs);

    const auto all = enumerate_trajectories(g, t, opt.cap);
    const auto log_f = dp_forward_log_flow(g, t, flow.log_z_star);
    const auto kl = enum_prefix_kl(g, all);
    std::vector<double> rhs(w.size());
    for (std::size_t s = 0; s < rhs.size(); ++s) {
      rhs[s] = log_f[s] - kl[s];
    }
    identity = std::max(identity, table_error(w, rhs));

    const PolicyTables star{optimal_forward(g, t, flow), t.log_pb};
    const auto w_star = dp_w_dagger(g, star, flow.log_z_star);
    terminal = std::max(terminal, backward_pair_expectations(g, star, w_star, true).max_abs);
  }
  std::ostringstream d;
  d << "interior " << interior << ", W+ = log F - KL " << identity << ", terminal spans at optimum "
    << terminal;
  return finish("backward Sub-EB balance at W+", std::max({interior, identity, terminal}), kBalanceTol, d.str());
}

std::vector<CheckResult> verify_all(const Environment& env, const VerifyOptions& opt) {
  const StateGraph g = StateGraph::build(env, opt.cap);
  return {check_oracle(g, opt), check_subeb_forward(env, g, opt), check_subtb(g, opt),
          check_subeb_backward(g, opt)};
}

}  // namespace subflow
