#include "subflow/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

namespace {

int count_filled(const std::vector<int>& cells) {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](int c) { return c >= 0; }));
}

}  // namespace

SequenceEnv::SequenceEnv(int length, int alphabet, SequenceReward reward)
    : length_(length), alphabet_(alphabet), reward_(std::move(reward)) {
  if (length < 1 || alphabet < 1) {
    throw ContractError("SequenceEnv: need length >= 1 and alphabet >= 1");
  }
  if (reward_.modes.empty()) {
    throw ContractError("SequenceEnv: reward needs at least one mode");
  }
  for (const auto& m : reward_.modes) {
    if (static_cast<int>(m.size()) != length_) {
      throw ContractError("SequenceEnv: mode length does not match sequence length");
    }
  }
}

SequenceReward SequenceEnv::default_reward(int length, int alphabet, int num_modes, double beta,
                                           std::uint64_t reward_seed) {
  SequenceReward r;
  r.beta = beta;
  std::mt19937_64 gen(reward_seed ^ 0x5eedf00dULL);
  std::uniform_int_distribution<int> block(0, alphabet - 1);
  for (int k = 0; k < num_modes; ++k) {
    std::vector<int> m(static_cast<std::size_t>(length));
    for (auto& b : m) {
      b = block(gen);
    }
    r.modes.push_back(std::move(m));
  }
  return r;
}

std::string SequenceEnv::name() const {
  std::ostringstream out;
  out << "sequence(D=" << length_ << ",M=" << alphabet_ << ")";
  return out.str();
}

State SequenceEnv::initial() const { return State{std::vector<int>(length_, -1), 0, false}; }

State SequenceEnv::final_state() const {
  return State{std::vector<int>(length_, alphabet_), 0, true};
}

bool SequenceEnv::is_terminating(const State& s) const {
  return !s.final && count_filled(s.cells) == length_;
}

ActionMask SequenceEnv::valid_actions(const State& s) const {
  require_not_final(s, "valid_actions");
  const int t = count_filled(s.cells);
  ActionMask mask(static_cast<std::size_t>(action_count()), 0);
  if (t == length_) {
    mask[static_cast<std::size_t>(terminate_action())] = 1;
  } else {
    std::fill(mask.begin(), mask.end() - 1, std::uint8_t{1});
  }
  return mask;
}

State SequenceEnv::step(const State& s, Action a) const {
  require_not_final(s, "step");
  const int t = count_filled(s.cells);
  if (a < 0 || a >= action_count()) {
    throw ContractError(name() + ": action " + std::to_string(a) + " out of range at " +
                        describe_state(s));
  }
  if (a == terminate_action()) {
    if (t != length_) {
      throw ContractError(name() + ": terminate invalid at partial sequence " + describe_state(s));
    }
    State f = final_state();
    f.step = t + 1;
    return f;
  }
  if (t == length_) {
    throw ContractError(name() + ": action " + std::to_string(a) + " invalid at full sequence " +
                        describe_state(s));
  }
  State child = s;
  const int block = a % alphabet_;
  if (a < alphabet_) {
    child.cells[static_cast<std::size_t>(t)] = block;
  } else {
    std::shift_right(child.cells.begin(), child.cells.begin() + t + 1, 1);
    child.cells[0] = block;
  }
  child.step = t + 1;
  return child;
}

std::vector<ParentEdge> SequenceEnv::parents(const State& s) const {
  std::vector<ParentEdge> out;
  if (s.final) {
    // Every full sequence, enumerated in key order.
    std::vector<int> cells(static_cast<std::size_t>(length_), 0);
    while (true) {
      out.push_back({State{cells, length_, false}, terminate_action()});
      int pos = 0;
      while (pos < length_ && ++cells[static_cast<std::size_t>(pos)] == alphabet_) {
        cells[static_cast<std::size_t>(pos)] = 0;
        ++pos;
      }
      if (pos == length_) {
        break;
      }
    }
    return out;
  }
  const auto mask = backward_actions(s);
  for (Action a = 0; a < action_count(); ++a) {
    if (mask[static_cast<std::size_t>(a)]) {
      out.push_back({parent_via(s, a), a});
    }
  }
  return out;
}

ActionMask SequenceEnv::backward_actions(const State& s) const {
  require_not_final(s, "backward_actions");
  const int t = count_filled(s.cells);
  ActionMask mask(static_cast<std::size_t>(action_count()), 0);
  if (t == 0) {
    return mask;
  }
  mask[static_cast<std::size_t>(s.cells[static_cast<std::size_t>(t - 1)])] = 1;
  mask[static_cast<std::size_t>(alphabet_ + s.cells[0])] = 1;
  return mask;
}

State SequenceEnv::parent_via(const State& s, Action a) const {
  require_not_final(s, "parent_via");
  const auto mask = backward_actions(s);
  if (a < 0 || a >= action_count() || !mask[static_cast<std::size_t>(a)]) {
    throw ContractError(name() + ": no parent of " + describe_state(s) + " via action " +
                        std::to_string(a));
  }
  const int t = count_filled(s.cells);
  State p = s;
  if (a < alphabet_) {
    p.cells[static_cast<std::size_t>(t - 1)] = -1;
  } else {
    std::shift_left(p.cells.begin(), p.cells.begin() + t, 1);
    p.cells[static_cast<std::size_t>(t - 1)] = -1;
  }
  p.step = t - 1;
  return p;
}

double SequenceEnv::reward(const State& x) const {
  if (!is_terminating(x)) {
    throw ContractError(name() + ": reward queried at non-terminating state " + describe_state(x));
  }
  double score = 0.0;
  for (const auto& m : reward_.modes) {
    int dist = 0;
    for (int i = 0; i < length_; ++i) {
      dist += x.cells[static_cast<std::size_t>(i)] != m[static_cast<std::size_t>(i)];
    }
    score += std::exp(-0.5 * dist * dist / (reward_.sigma * reward_.sigma));
  }
  score /= static_cast<double>(reward_.modes.size());
  return reward_.r_min + (reward_.r_max - reward_.r_min) * std::pow(score, reward_.beta);
}

void SequenceEnv::encode(const State& s, std::span<double> out) const {
  require_not_final(s, "encode");
  if (static_cast<int>(out.size()) != encoding_width()) {
    throw ContractError(name() + ": encode buffer has wrong width");
  }
  std::fill(out.begin(), out.end(), 0.0);
  // Slot 0 of each position is the padding value -1; slot b+1 is block b.
  for (int i = 0; i < length_; ++i) {
    out[static_cast<std::size_t>(i * (alphabet_ + 1) + s.cells[static_cast<std::size_t>(i)] + 1)] = 1.0;
  }
}

std::uint64_t SequenceEnv::key(const State& s) const {
  if (s.final) {
    std::uint64_t k = 1;
    for (int i = 0; i < length_; ++i) {
      k *= static_cast<std::uint64_t>(alphabet_ + 1);
    }
    return k;
  }
  std::uint64_t k = 0;
  for (int i = length_ - 1; i >= 0; --i) {
    k = k * static_cast<std::uint64_t>(alphabet_ + 1) +
        static_cast<std::uint64_t>(s.cells[static_cast<std::size_t>(i)] + 1);
  }
  return k;
}

std::optional<std::uint64_t> SequenceEnv::state_count() const {
  // sum_{t=0}^{D} M^t
  const auto m = static_cast<std::uint64_t>(alphabet_);
  std::uint64_t total = 0;
  std::uint64_t term = 1;
  for (int t = 0; t <= length_; ++t) {
    if (total > std::numeric_limits<std::uint64_t>::max() - term) {
      return std::nullopt;
    }
    total += term;
    if (t < length_) {
      if (term > std::numeric_limits<std::uint64_t>::max() / m) {
        return std::nullopt;
      }
      term *= m;
    }
  }
  return total;
}

nlohmann::json SequenceEnv::describe() const {
  return {{"kind", "sequence"},     {"seq_len", length_},      {"alphabet", alphabet_},
          {"beta", reward_.beta},   {"modes", reward_.modes},  {"sigma", reward_.sigma},
          {"r_min", reward_.r_min}, {"r_max", reward_.r_max}};
}

}  // namespace subflow
