#include "subflow/actor.hpp"

#include <cmath>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

std::vector<double> td_forward(const Trajectory& t, std::span<const double> value,
                               double terminal_log_mass) {
  const auto len = static_cast<std::size_t>(t.length());
  if (value.size() != len) {
    throw ContractError("td_forward: need one value per non-final state");
  }
  std::vector<double> td(len);
  for (std::size_t k = 0; k < len; ++k) {
    const bool last = k + 1 == len;
    const double reward = (last ? terminal_log_mass : t.log_pb[k]) - t.log_pf[k];
    td[k] = reward + (last ? 0.0 : value[k + 1]) - value[k];
  }
  return td;
}

std::vector<double> advantages_forward(std::span<const double> td, double gamma) {
  std::vector<double> a(td.size());
  double tail = 0.0;
  for (std::size_t h = td.size(); h-- > 0;) {
    tail = td[h] + gamma * tail;
    a[h] = tail;
  }
  return a;
}

double advantage_forward(const Trajectory& t, int h, std::span<const double> value, double gamma,
                         double terminal_log_mass) {
  if (h < 0 || h >= t.length()) {
    throw ContractError("advantage_forward: edge index out of range");
  }
  const auto td = td_forward(t, value, terminal_log_mass);
  double acc = 0.0;
  double g = 1.0;
  for (std::size_t i = static_cast<std::size_t>(h); i < td.size(); ++i) {
    acc += g * td[i];
    g *= gamma;
  }
  return acc;
}

std::vector<double> td_backward(const Trajectory& t, std::span<const double> w) {
  const auto len = static_cast<std::size_t>(t.length());
  if (w.size() != len) {
    throw ContractError("td_backward: need one W value per non-final state");
  }
  std::vector<double> td(len - 1);
  for (std::size_t i = 0; i + 1 < len; ++i) {
    td[i] = t.log_pf[i] - t.log_pb[i] + w[i] - w[i + 1];
  }
  return td;
}

std::vector<double> advantages_backward(std::span<const double> td, double gamma) {
  std::vector<double> a(td.size());
  double head = 0.0;
  for (std::size_t h = 0; h < td.size(); ++h) {
    head = td[h] + gamma * head;
    a[h] = head;
  }
  return a;
}

double advantage_backward(const Trajectory& t, int h, std::span<const double> w, double gamma) {
  if (h < 0 || h + 1 >= t.length()) {
    throw ContractError("advantage_backward: edge index out of range");
  }
  const auto td = td_backward(t, w);
  double acc = 0.0;
  double g = 1.0;
  for (int i = h; i >= 0; --i) {
    acc += g * td[static_cast<std::size_t>(i)];
    g *= gamma;
  }
  return acc;
}

namespace {

std::vector<double> batch_weights(std::size_t n, std::span<const double> weights) {
  if (weights.empty()) {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
  }
  if (weights.size() != n) {
    throw ContractError("actor: one weight per trajectory required");
  }
  return {weights.begin(), weights.end()};
}

}  // namespace

GradEstimate grad_actor_forward(const PolicyBundle& bundle, const Environment& env,
                                std::span<const Trajectory> batch, double gamma,
                                std::span<const double> weights, Exec exec) {
  if (batch.empty()) {
    throw ContractError("grad_actor_forward: empty batch");
  }
  const auto wts = batch_weights(batch.size(), weights);
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<std::size_t> offset;
  for (const auto& t : batch) {
    offset.push_back(states.size());
    for (int k = 0; k < t.length(); ++k) {
      states.push_back(t.states[static_cast<std::size_t>(k)]);
      actions.push_back(t.actions[static_cast<std::size_t>(k)]);
    }
  }
  const Matrix fresh = forward_log_probs(bundle, env, states);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (int k = 0; k < batch[n].length(); ++k) {
      const auto row = static_cast<Eigen::Index>(offset[n] + static_cast<std::size_t>(k));
      const double now = fresh(row, actions[static_cast<std::size_t>(row)]);
      const double then = batch[n].log_pf[static_cast<std::size_t>(k)];
      if (!(std::abs(now - then) <= kStalenessTolerance)) {
        std::ostringstream msg;
        msg << "grad_actor_forward: off-policy batch, trajectory " << n << " edge " << k
            << " cached log pi_F " << then << " vs current " << now;
        throw ContractError(msg.str());
      }
    }
  }
  const auto values = head_values(bundle, HeadId::kValue, env, states);

  const auto count = static_cast<std::ptrdiff_t>(batch.size());
  std::vector<std::vector<double>> adv(batch.size());
  auto one = [&](std::ptrdiff_t n) {
    const auto& t = batch[static_cast<std::size_t>(n)];
    std::span<const double> v(values.data() + offset[static_cast<std::size_t>(n)],
                              static_cast<std::size_t>(t.length()));
    const auto td = td_forward(t, v, terminal_log_mass(bundle, t.terminal_reward));
    adv[static_cast<std::size_t>(n)] = advantages_forward(td, gamma);
  };
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t n = 0; n < count; ++n) {
      one(n);
    }
  } else {
    for (std::ptrdiff_t n = 0; n < count; ++n) {
      one(n);
    }
  }

  std::vector<double> coeffs;
  coeffs.reserve(states.size());
  double abs_sum = 0.0;
  std::size_t edges = 0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (double a : adv[n]) {
      coeffs.push_back(wts[n] * a);
      abs_sum += std::abs(a);
      ++edges;
    }
  }
  GradEstimate est{BundleGrads(bundle), static_cast<int>(batch.size()), abs_sum / static_cast<double>(edges)};
  accumulate_forward_logprob_grad(bundle, env, states, actions, coeffs, est.grads[HeadId::kForward]);
  if (bundle.has(HeadId::kLogZ)) {
    est.grads[HeadId::kLogZ][0] = grad_logz(bundle, batch, wts);
  }
  return est;
}

GradEstimate grad_actor_backward(const PolicyBundle& bundle, const Environment& env,
                                 std::span<const Trajectory> batch, double gamma,
                                 std::span<const double> weights, Exec exec) {
  if (batch.empty()) {
    throw ContractError("grad_actor_backward: empty batch");
  }
  const auto wts = batch_weights(batch.size(), weights);
  std::vector<State> states;
  std::vector<std::size_t> offset;
  std::vector<State> children;
  std::vector<Action> actions;
  std::vector<std::size_t> child_offset;
  for (const auto& t : batch) {
    offset.push_back(states.size());
    child_offset.push_back(children.size());
    for (int k = 0; k < t.length(); ++k) {
      states.push_back(t.states[static_cast<std::size_t>(k)]);
      if (k + 1 < t.length()) {
        children.push_back(t.states[static_cast<std::size_t>(k + 1)]);
        actions.push_back(t.actions[static_cast<std::size_t>(k)]);
      }
    }
  }
  const Matrix fresh = backward_log_probs(bundle, env, children);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (int k = 0; k + 1 < batch[n].length(); ++k) {
      const auto row = static_cast<Eigen::Index>(child_offset[n] + static_cast<std::size_t>(k));
      const double now = fresh(row, actions[static_cast<std::size_t>(row)]);
      const double then = batch[n].log_pb[static_cast<std::size_t>(k)];
      if (!(std::abs(now - then) <= kStalenessTolerance)) {
        std::ostringstream msg;
        msg << "grad_actor_backward: stale batch, trajectory " << n << " edge " << k
            << " cached log pi_B " << then << " vs current " << now;
        throw ContractError(msg.str());
      }
    }
  }
  const auto w = head_values(bundle, HeadId::kBackwardValue, env, states);

  const auto count = static_cast<std::ptrdiff_t>(batch.size());
  std::vector<std::vector<double>> adv(batch.size());
  auto one = [&](std::ptrdiff_t n) {
    const auto& t = batch[static_cast<std::size_t>(n)];
    std::span<const double> wv(w.data() + offset[static_cast<std::size_t>(n)],
                               static_cast<std::size_t>(t.length()));
    adv[static_cast<std::size_t>(n)] = advantages_backward(td_backward(t, wv), gamma);
  };
  if (exec == Exec::kParallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t n = 0; n < count; ++n) {
      one(n);
    }
  } else {
    for (std::ptrdiff_t n = 0; n < count; ++n) {
      one(n);
    }
  }

  std::vector<double> coeffs;
  coeffs.reserve(children.size());
  double abs_sum = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (double a : adv[n]) {
      coeffs.push_back(wts[n] * a);
      abs_sum += std::abs(a);
    }
  }
  GradEstimate est{BundleGrads(bundle), static_cast<int>(batch.size()),
                   children.empty() ? 0.0 : abs_sum / static_cast<double>(children.size())};
  accumulate_backward_logprob_grad(bundle, env, children, actions, coeffs, est.grads[HeadId::kBackward]);
  return est;
}

double grad_logz(const PolicyBundle& bundle, std::span<const Trajectory> batch,
                 std::span<const double> weights) {
  if (!bundle.has(HeadId::kLogZ)) {
    throw ContractError("grad_logz: log Z head is not active");
  }
  if (batch.empty()) {
    throw ContractError("grad_logz: empty batch");
  }
  const auto wts = batch_weights(batch.size(), weights);
  double coeff = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& t = batch[n];
    double sum = terminal_log_mass(bundle, t.terminal_reward);
    for (int k = 0; k < t.length(); ++k) {
      sum -= t.log_pf[static_cast<std::size_t>(k)];
      if (k + 1 < t.length()) {
        sum += t.log_pb[static_cast<std::size_t>(k)];
      }
    }
    coeff += wts[n] * sum;
  }
  return coeff;
}

}  // namespace subflow
