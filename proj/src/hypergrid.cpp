#include "subflow/hypergrid.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

Hypergrid::Hypergrid(int height, int dims, HypergridReward reward)
    : height_(height), dims_(dims), reward_(reward) {
  if (height < 2 || dims < 1) {
    throw ContractError("Hypergrid: need height >= 2 and dims >= 1");
  }
}

std::string Hypergrid::name() const {
  std::ostringstream out;
  out << "hypergrid(N=" << height_ << ",D=" << dims_ << ")";
  return out.str();
}

State Hypergrid::initial() const { return State{std::vector<int>(dims_, 0), 0, false}; }

State Hypergrid::final_state() const { return State{std::vector<int>(dims_, -1), 0, true}; }

void Hypergrid::check_cells(const State& s) const {
  if (static_cast<int>(s.cells.size()) != dims_) {
    throw ContractError(name() + ": state " + describe_state(s) + " has wrong dimension");
  }
  if (s.final) {
    return;
  }
  for (int c : s.cells) {
    if (c < 0 || c >= height_) {
      throw ContractError(name() + ": state " + describe_state(s) + " is outside the grid");
    }
  }
}

ActionMask Hypergrid::valid_actions(const State& s) const {
  require_not_final(s, "valid_actions");
  check_cells(s);
  ActionMask mask(static_cast<std::size_t>(dims_ + 1), 0);
  for (int d = 0; d < dims_; ++d) {
    mask[static_cast<std::size_t>(d)] = s.cells[static_cast<std::size_t>(d)] + 1 < height_;
  }
  mask[static_cast<std::size_t>(dims_)] = 1;
  return mask;
}

State Hypergrid::step(const State& s, Action a) const {
  require_not_final(s, "step");
  check_cells(s);
  if (a < 0 || a > dims_) {
    throw ContractError(name() + ": action " + std::to_string(a) + " out of range at " +
                        describe_state(s));
  }
  if (a == dims_) {
    State f = final_state();
    f.step = s.step + 1;
    return f;
  }
  if (s.cells[static_cast<std::size_t>(a)] + 1 >= height_) {
    throw ContractError(name() + ": action +dim" + std::to_string(a) + " invalid at " +
                        describe_state(s));
  }
  State child = s;
  ++child.cells[static_cast<std::size_t>(a)];
  ++child.step;
  return child;
}

std::vector<ParentEdge> Hypergrid::parents(const State& s) const {
  check_cells(s);
  std::vector<ParentEdge> out;
  if (s.final) {
    // Every grid point can stop.
    const auto n = static_cast<int>(*state_count());
    out.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      State x{std::vector<int>(dims_, 0), 0, false};
      int rem = k;
      for (int d = 0; d < dims_; ++d) {
        x.cells[static_cast<std::size_t>(d)] = rem % height_;
        rem /= height_;
      }
      x.step = std::accumulate(x.cells.begin(), x.cells.end(), 0);
      out.push_back({std::move(x), dims_});
    }
    return out;
  }
  for (int d = 0; d < dims_; ++d) {
    if (s.cells[static_cast<std::size_t>(d)] > 0) {
      out.push_back({parent_via(s, d), d});
    }
  }
  return out;
}

ActionMask Hypergrid::backward_actions(const State& s) const {
  require_not_final(s, "backward_actions");
  check_cells(s);
  ActionMask mask(static_cast<std::size_t>(dims_ + 1), 0);
  for (int d = 0; d < dims_; ++d) {
    mask[static_cast<std::size_t>(d)] = s.cells[static_cast<std::size_t>(d)] > 0;
  }
  return mask;
}

State Hypergrid::parent_via(const State& s, Action a) const {
  require_not_final(s, "parent_via");
  if (a < 0 || a >= dims_ || s.cells[static_cast<std::size_t>(a)] == 0) {
    throw ContractError(name() + ": no parent of " + describe_state(s) + " via action " +
                        std::to_string(a));
  }
  State p = s;
  --p.cells[static_cast<std::size_t>(a)];
  p.step = std::accumulate(p.cells.begin(), p.cells.end(), 0);
  return p;
}

double Hypergrid::reward(const State& x) const {
  if (x.final) {
    throw ContractError(name() + ": reward queried at s_f");
  }
  check_cells(x);
  bool outer = true;
  bool ring = true;
  for (int c : x.cells) {
    const double dev = std::abs(static_cast<double>(c) / (height_ - 1) - 0.5);
    outer = outer && dev > 0.25 && dev <= 0.5;
    ring = ring && dev > 0.3 && dev <= 0.4;
  }
  return reward_.r0 + (outer ? reward_.r1 : 0.0) + (ring ? reward_.r2 : 0.0);
}

void Hypergrid::encode(const State& s, std::span<double> out) const {
  require_not_final(s, "encode");
  check_cells(s);
  if (static_cast<int>(out.size()) != encoding_width()) {
    throw ContractError(name() + ": encode buffer has wrong width");
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (int d = 0; d < dims_; ++d) {
    out[static_cast<std::size_t>(d * height_ + s.cells[static_cast<std::size_t>(d)])] = 1.0;
  }
}

std::uint64_t Hypergrid::key(const State& s) const {
  if (s.final) {
    return *state_count();
  }
  std::uint64_t k = 0;
  for (int d = dims_ - 1; d >= 0; --d) {
    k = k * static_cast<std::uint64_t>(height_) + static_cast<std::uint64_t>(s.cells[static_cast<std::size_t>(d)]);
  }
  return k;
}

std::optional<std::uint64_t> Hypergrid::state_count() const {
  std::uint64_t n = 1;
  for (int d = 0; d < dims_; ++d) {
    if (n > std::numeric_limits<std::uint64_t>::max() / static_cast<std::uint64_t>(height_)) {
      return std::nullopt;
    }
    n *= static_cast<std::uint64_t>(height_);
  }
  return n;
}

nlohmann::json Hypergrid::describe() const {
  return {{"kind", "hypergrid"},
          {"height", height_},
          {"dims", dims_},
          {"reward", {{"r0", reward_.r0}, {"r1", reward_.r1}, {"r2", reward_.r2}}}};
}

}  // namespace subflow
