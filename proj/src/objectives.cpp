#include "subflow/objectives.hpp"

#include <cmath>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

WeightKind parse_weight_kind(const std::string& name) {
  if (name == "subtb_geometric") {
    return WeightKind::kSubtbGeometric;
  }
  if (name == "edges_only") {
    return WeightKind::kEdgesOnly;
  }
  if (name == "full_only") {
    return WeightKind::kFullOnly;
  }
  throw ConfigError("objective.weights", "unknown weight scheme '" + name + "'");
}

std::string to_string(WeightKind k) {
  switch (k) {
    case WeightKind::kSubtbGeometric:
      return "subtb_geometric";
    case WeightKind::kEdgesOnly:
      return "edges_only";
    case WeightKind::kFullOnly:
      return "full_only";
  }
  return "unknown";
}

double WeightScheme::weight(int i, int j, int length) const {
  if (!(0 <= i && i < j && j <= length)) {
    throw ContractError("WeightScheme::weight: need 0 <= i < j <= length");
  }
  switch (kind) {
    case WeightKind::kEdgesOnly:
      return j - i == 1 ? 1.0 : 0.0;
    case WeightKind::kFullOnly:
      return i == 0 && j == length ? 1.0 : 0.0;
    case WeightKind::kSubtbGeometric:
      break;
  }
  // sum over pairs of lambda^d = sum_{d=1}^{L} (L - d + 1) lambda^d
  double norm = 0.0;
  double p = 1.0;
  for (int d = 1; d <= length; ++d) {
    p *= lambda;
    norm += (length - d + 1) * p;
  }
  return std::pow(lambda, j - i) / norm;
}

std::vector<std::pair<int, int>> subtrajectory_pairs(int length) {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(length * (length + 1) / 2));
  for (int i = 0; i < length; ++i) {
    for (int j = i + 1; j <= length; ++j) {
      out.emplace_back(i, j);
    }
  }
  return out;
}

std::vector<double> edge_terms(const Trajectory& t, std::span<const double> head,
                               double terminal_log_mass) {
  const auto len = static_cast<std::size_t>(t.length());
  if (head.size() != len) {
    throw ContractError("edge_terms: need one head value per non-final state");
  }
  std::vector<double> e(len);
  for (std::size_t k = 0; k < len; ++k) {
    const double lhs = t.log_pf[k] + head[k];
    const double rhs = k + 1 == len ? terminal_log_mass : t.log_pb[k] + head[k + 1];
    e[k] = lhs - rhs;
  }
  return e;
}

double pair_residual(std::span<const double> terms, int i, int j) {
  if (!(0 <= i && i < j && j <= static_cast<int>(terms.size()))) {
    std::ostringstream msg;
    msg << "pair_residual: (" << i << ", " << j << ") outside a trajectory of " << terms.size()
        << " edges";
    throw ContractError(msg.str());
  }
  double d = 0.0;
  for (int k = i; k < j; ++k) {
    d += terms[static_cast<std::size_t>(k)];
  }
  return d;
}

double residual_subtb(const Trajectory& t, int i, int j, std::span<const double> log_flow) {
  return pair_residual(edge_terms(t, log_flow, t.log_reward), i, j);
}

double residual_subeb(const Trajectory& t, int i, int j, std::span<const double> value,
                      double log_z) {
  return pair_residual(edge_terms(t, value, t.log_reward - log_z), i, j);
}

double residual_subeb_backward(const Trajectory& t, int i, int j, std::span<const double> w) {
  return pair_residual(edge_terms(t, w, t.log_reward), i, j);
}

namespace {

void check_finite(std::span<const std::vector<double>> terms) {
  for (std::size_t n = 0; n < terms.size(); ++n) {
    for (std::size_t k = 0; k < terms[n].size(); ++k) {
      if (!std::isfinite(terms[n][k])) {
        std::ostringstream msg;
        msg << "non-finite residual in trajectory " << n << " at pair (" << k << ", " << k + 1
            << "): " << terms[n][k];
        throw NumericalError(msg.str());
      }
    }
  }
}

struct PairOut {
  double loss = 0.0;
  std::vector<double> edge;
  std::vector<double> state;
};

// dL/de_k collects 2 w delta over the pairs covering edge k; a difference
// array keeps this O(L^2).
PairOut pair_kernel(const std::vector<double>& e, const WeightScheme& scheme, double scale) {
  const int len = static_cast<int>(e.size());
  PairOut out;
  std::vector<double> prefix(static_cast<std::size_t>(len) + 1, 0.0);
  for (int k = 0; k < len; ++k) {
    prefix[static_cast<std::size_t>(k) + 1] = prefix[static_cast<std::size_t>(k)] + e[static_cast<std::size_t>(k)];
  }
  std::vector<double> by_span(static_cast<std::size_t>(len) + 1, 0.0);
  for (int d = 1; d <= len; ++d) {
    by_span[static_cast<std::size_t>(d)] = scheme.weight(0, d, len);
  }
  const bool span_only = scheme.kind != WeightKind::kFullOnly;
  std::vector<double> diff(static_cast<std::size_t>(len) + 1, 0.0);
  for (int i = 0; i < len; ++i) {
    for (int j = i + 1; j <= len; ++j) {
      const double w = span_only ? by_span[static_cast<std::size_t>(j - i)] : scheme.weight(i, j, len);
      if (w == 0.0) {
        continue;
      }
      const double d = prefix[static_cast<std::size_t>(j)] - prefix[static_cast<std::size_t>(i)];
      out.loss += w * d * d;
      diff[static_cast<std::size_t>(i)] += 2.0 * w * d;
      diff[static_cast<std::size_t>(j)] -= 2.0 * w * d;
    }
  }
  out.loss *= scale;
  out.edge.assign(static_cast<std::size_t>(len), 0.0);
  double run = 0.0;
  for (int k = 0; k < len; ++k) {
    run += diff[static_cast<std::size_t>(k)];
    out.edge[static_cast<std::size_t>(k)] = scale * run;
  }
  // h(s_k) enters e_k with + and e_{k-1} with -.
  out.state.assign(static_cast<std::size_t>(len), 0.0);
  for (int k = 0; k < len; ++k) {
    out.state[static_cast<std::size_t>(k)] =
        out.edge[static_cast<std::size_t>(k)] - (k > 0 ? out.edge[static_cast<std::size_t>(k) - 1] : 0.0);
  }
  return out;
}

// T_h = sum_{i>=h} lambda^(i-h) e_i. With the TD error r + V' - V = -e, the
// target is V^lambda = V - T_h, so the loss term is T_h^2 and its derivative
// with respect to V(s_h), target fixed, is 2 T_h.
PairOut td_kernel(const std::vector<double>& e, double lambda, double scale) {
  const auto len = e.size();
  PairOut out;
  out.state.assign(len, 0.0);
  double tail = 0.0;
  for (std::size_t h = len; h-- > 0;) {
    tail = e[h] + lambda * tail;
    out.loss += tail * tail;
    out.state[h] = 2.0 * scale * tail;
  }
  out.loss *= scale;
  return out;
}

template <class Kernel>
TermGrads run_kernel(std::span<const std::vector<double>> terms, Exec exec, Kernel kernel) {
  if (terms.empty()) {
    throw ContractError("objective: empty batch");
  }
  check_finite(terms);
  const auto n = static_cast<std::ptrdiff_t>(terms.size());
  std::vector<PairOut> parts(terms.size());
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      parts[static_cast<std::size_t>(t)] = kernel(terms[static_cast<std::size_t>(t)]);
    }
  } else {
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      parts[static_cast<std::size_t>(t)] = kernel(terms[static_cast<std::size_t>(t)]);
    }
  }
  TermGrads out;
  out.per_trajectory.reserve(parts.size());
  for (auto& p : parts) {
    out.loss += p.loss;
    out.per_trajectory.push_back(p.loss);
    out.edge.push_back(std::move(p.edge));
    out.state.push_back(std::move(p.state));
  }
  return out;
}

}  // namespace

TermGrads weighted_pair_loss(std::span<const std::vector<double>> terms, const WeightScheme& scheme,
                             Exec exec) {
  const double scale = 1.0 / static_cast<double>(terms.size());
  return run_kernel(terms, exec,
                    [&](const std::vector<double>& e) { return pair_kernel(e, scheme, scale); });
}

TermGrads lambda_td_loss(std::span<const std::vector<double>> terms, double lambda, Exec exec) {
  const double scale = 1.0 / static_cast<double>(terms.size());
  TermGrads g = run_kernel(terms, exec,
                           [&](const std::vector<double>& e) { return td_kernel(e, lambda, scale); });
  g.edge.clear();
  return g;
}

HeadId residual_head(ResidualKind kind) {
  switch (kind) {
    case ResidualKind::kSubtb:
      return HeadId::kFlow;
    case ResidualKind::kSubeb:
      return HeadId::kValue;
    case ResidualKind::kSubebBackward:
      return HeadId::kBackwardValue;
  }
  return HeadId::kValue;
}

namespace {

struct Flat {
  std::vector<State> states;
  std::vector<std::size_t> offset;  // first state of each trajectory
};

Flat flatten_states(std::span<const Trajectory> batch) {
  Flat f;
  for (const auto& t : batch) {
    f.offset.push_back(f.states.size());
    for (int k = 0; k < t.length(); ++k) {
      f.states.push_back(t.states[static_cast<std::size_t>(k)]);
    }
  }
  return f;
}

std::vector<std::vector<double>> batch_terms(const PolicyBundle& bundle, const Environment& env,
                                             std::span<const Trajectory> batch, HeadId head,
                                             bool divide_by_z, const Flat& flat) {
  if (!bundle.has(head)) {
    throw ContractError(std::string("objective needs the '") + head_name(head) + "' head");
  }
  const auto values = head_values(bundle, head, env, flat.states);
  std::vector<std::vector<double>> terms;
  terms.reserve(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& t = batch[n];
    std::span<const double> h(values.data() + flat.offset[n], static_cast<std::size_t>(t.length()));
    const double terminal = divide_by_z ? terminal_log_mass(bundle, t.terminal_reward) : t.log_reward;
    terms.push_back(edge_terms(t, h, terminal));
  }
  return terms;
}

void route_state_grads(const PolicyBundle& bundle, const Environment& env, HeadId head,
                       const Flat& flat, const TermGrads& g, BundleGrads& grads) {
  std::vector<double> coeffs;
  coeffs.reserve(flat.states.size());
  for (const auto& s : g.state) {
    coeffs.insert(coeffs.end(), s.begin(), s.end());
  }
  accumulate_head_grad(bundle, head, env, flat.states, coeffs, grads[head]);
}

void route_policy_grads(const PolicyBundle& bundle, const Environment& env,
                        std::span<const Trajectory> batch, const TermGrads& g, bool forward,
                        bool backward, BundleGrads& grads) {
  std::vector<State> fs;
  std::vector<Action> fa;
  std::vector<double> fc;
  std::vector<State> bs;
  std::vector<Action> ba;
  std::vector<double> bc;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& t = batch[n];
    for (int k = 0; k < t.length(); ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const double gk = g.edge[n][ku];
      if (forward) {
        fs.push_back(t.states[ku]);
        fa.push_back(t.actions[ku]);
        fc.push_back(gk);
      }
      if (backward && k + 1 < t.length()) {
        bs.push_back(t.states[ku + 1]);
        ba.push_back(t.actions[ku]);
        bc.push_back(-gk);
      }
    }
  }
  if (forward) {
    accumulate_forward_logprob_grad(bundle, env, fs, fa, fc, grads[HeadId::kForward]);
  }
  if (backward && bundle.has(HeadId::kBackward)) {
    accumulate_backward_logprob_grad(bundle, env, bs, ba, bc, grads[HeadId::kBackward]);
  }
}

ResidualReport finish(TermGrads& g, std::vector<std::vector<double>>&& terms, const BundleGrads& grads) {
  ResidualReport r;
  r.loss = g.loss;
  r.edge_terms = std::move(terms);
  r.grad_norm_theta = grads.norm(ParamSet::kTheta);
  r.grad_norm_phi = grads.norm(ParamSet::kPhi);
  return r;
}

}  // namespace

ResidualReport loss_weighted(const PolicyBundle& bundle, const Environment& env,
                             std::span<const Trajectory> batch, ResidualKind kind,
                             const WeightScheme& scheme, BundleGrads& grads, Exec exec) {
  const HeadId head = residual_head(kind);
  const Flat flat = flatten_states(batch);
  auto terms = batch_terms(bundle, env, batch, head, kind == ResidualKind::kSubeb, flat);
  TermGrads g = weighted_pair_loss(terms, scheme, exec);
  route_state_grads(bundle, env, head, flat, g, grads);
  switch (kind) {
    case ResidualKind::kSubtb:
      route_policy_grads(bundle, env, batch, g, true, true, grads);
      break;
    case ResidualKind::kSubeb:
      route_policy_grads(bundle, env, batch, g, false, true, grads);
      break;
    case ResidualKind::kSubebBackward:
      route_policy_grads(bundle, env, batch, g, true, false, grads);
      break;
  }
  return finish(g, std::move(terms), grads);
}

ResidualReport loss_lambda_td(const PolicyBundle& bundle, const Environment& env,
                              std::span<const Trajectory> batch, double lambda, BundleGrads& grads,
                              Exec exec) {
  const Flat flat = flatten_states(batch);
  auto terms = batch_terms(bundle, env, batch, HeadId::kValue, true, flat);
  TermGrads g = lambda_td_loss(terms, lambda, exec);
  route_state_grads(bundle, env, HeadId::kValue, flat, g, grads);
  return finish(g, std::move(terms), grads);
}

}  // namespace subflow
