#include "subflow/env.hpp"

#include <algorithm>
#include <deque>
#include <sstream>
#include <unordered_set>

#include "subflow/errors.hpp"
#include "subflow/hypergrid.hpp"
#include "subflow/sequence.hpp"

namespace subflow {

int Environment::parent_count(const State& s) const {
  const auto mask = backward_actions(s);
  return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<double> Environment::encode(const State& s) const {
  std::vector<double> out(static_cast<std::size_t>(encoding_width()));
  encode(s, out);
  return out;
}

bool Environment::enumerable(std::uint64_t cap) const {
  const auto n = state_count();
  return n.has_value() && *n <= cap;
}

std::vector<State> Environment::enumerate_states(std::uint64_t cap) const {
  const auto n = state_count();
  if (!n || *n > cap) {
    std::ostringstream msg;
    msg << name() << ": refusing to enumerate ";
    if (n) {
      msg << *n;
    } else {
      msg << "more than 2^64";
    }
    msg << " states (cap " << cap << ")";
    throw CapabilityError(msg.str());
  }

  // BFS in step order. Both environments are graded on non-final states, so
  // a state first seen at step h is never reached at another step.
  std::vector<State> out;
  out.reserve(static_cast<std::size_t>(*n));
  std::unordered_set<std::uint64_t> seen;
  std::deque<State> queue{initial()};
  seen.insert(key(initial()));
  const Action stop = terminate_action();
  while (!queue.empty()) {
    State s = std::move(queue.front());
    queue.pop_front();
    const auto mask = valid_actions(s);
    for (Action a = 0; a < action_count(); ++a) {
      if (!mask[static_cast<std::size_t>(a)] || a == stop) {
        continue;
      }
      State child = step(s, a);
      if (seen.insert(key(child)).second) {
        queue.push_back(std::move(child));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void Environment::require_not_final(const State& s, const char* op) const {
  if (s.final) {
    throw ContractError(std::string(op) + ": s_f has no outgoing edges (" + name() + ")");
  }
}

std::string describe_state(const State& s) {
  if (s.final) {
    return "s_f";
  }
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < s.cells.size(); ++i) {
    out << (i ? "," : "") << s.cells[i];
  }
  out << ')';
  return out.str();
}

namespace {

int get_int(const nlohmann::json& cfg, const char* key, int fallback, const char* path) {
  if (!cfg.contains(key)) {
    return fallback;
  }
  const auto& v = cfg.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError(path, "expected an integer");
  }
  return v.get<int>();
}

double get_double(const nlohmann::json& cfg, const char* key, double fallback, const char* path) {
  if (!cfg.contains(key)) {
    return fallback;
  }
  const auto& v = cfg.at(key);
  if (!v.is_number()) {
    throw ConfigError(path, "expected a number");
  }
  return v.get<double>();
}

void reject_unknown(const nlohmann::json& cfg, std::initializer_list<const char*> keys, const std::string& prefix) {
  for (const auto& [k, v] : cfg.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(prefix + k, "unknown key");
    }
  }
}

}  // namespace

std::unique_ptr<Environment> make_environment(const nlohmann::json& cfg) {
  if (!cfg.is_object()) {
    throw ConfigError("env", "expected an object");
  }
  if (!cfg.contains("kind")) {
    throw ConfigError("env.kind", "missing required key");
  }
  if (!cfg.at("kind").is_string()) {
    throw ConfigError("env.kind", "expected a string");
  }
  const auto kind = cfg.at("kind").get<std::string>();
  if (kind == "hypergrid") {
    reject_unknown(cfg, {"kind", "height", "dims", "reward"}, "env.");
    const int height = get_int(cfg, "height", 8, "env.height");
    const int dims = get_int(cfg, "dims", 2, "env.dims");
    if (height < 2) {
      throw ConfigError("env.height", "must be >= 2");
    }
    if (dims < 1) {
      throw ConfigError("env.dims", "must be >= 1");
    }
    HypergridReward r;
    if (cfg.contains("reward")) {
      const auto& rc = cfg.at("reward");
      if (!rc.is_object()) {
        throw ConfigError("env.reward", "expected an object");
      }
      reject_unknown(rc, {"r0", "r1", "r2"}, "env.reward.");
      r.r0 = get_double(rc, "r0", r.r0, "env.reward.r0");
      r.r1 = get_double(rc, "r1", r.r1, "env.reward.r1");
      r.r2 = get_double(rc, "r2", r.r2, "env.reward.r2");
      if (r.r0 <= 0.0) {
        throw ConfigError("env.reward.r0", "must be > 0");
      }
    }
    return std::make_unique<Hypergrid>(height, dims, r);
  }
  if (kind == "sequence") {
    reject_unknown(cfg, {"kind", "seq_len", "alphabet", "beta", "modes", "num_modes", "reward_seed", "sigma", "r_min", "r_max"},
                   "env.");
    const int len = get_int(cfg, "seq_len", 4, "env.seq_len");
    const int alpha = get_int(cfg, "alphabet", 4, "env.alphabet");
    const double beta = get_double(cfg, "beta", 3.0, "env.beta");
    if (len < 1) {
      throw ConfigError("env.seq_len", "must be >= 1");
    }
    if (alpha < 1) {
      throw ConfigError("env.alphabet", "must be >= 1");
    }
    if (beta <= 0.0) {
      throw ConfigError("env.beta", "must be > 0");
    }
    SequenceReward r;
    if (cfg.contains("modes")) {
      const auto& modes = cfg.at("modes");
      if (!modes.is_array()) {
        throw ConfigError("env.modes", "expected an array of sequences");
      }
      for (const auto& m : modes) {
        auto seq = m.get<std::vector<int>>();
        if (static_cast<int>(seq.size()) != len ||
            std::any_of(seq.begin(), seq.end(), [&](int b) { return b < 0 || b >= alpha; })) {
          throw ConfigError("env.modes", "each mode needs seq_len blocks in [0, alphabet)");
        }
        r.modes.push_back(std::move(seq));
      }
      if (r.modes.empty()) {
        throw ConfigError("env.modes", "need at least one mode");
      }
      r.beta = beta;
    } else {
      const int num_modes = get_int(cfg, "num_modes", 3, "env.num_modes");
      const auto reward_seed =
          static_cast<std::uint64_t>(get_int(cfg, "reward_seed", 0, "env.reward_seed"));
      if (num_modes < 1) {
        throw ConfigError("env.num_modes", "must be >= 1");
      }
      r = SequenceEnv::default_reward(len, alpha, num_modes, beta, reward_seed);
    }
    r.sigma = get_double(cfg, "sigma", r.sigma, "env.sigma");
    r.r_min = get_double(cfg, "r_min", r.r_min, "env.r_min");
    r.r_max = get_double(cfg, "r_max", r.r_max, "env.r_max");
    if (r.sigma <= 0.0) {
      throw ConfigError("env.sigma", "must be > 0");
    }
    if (r.r_min <= 0.0 || r.r_max < r.r_min) {
      throw ConfigError("env.r_min", "need 0 < r_min <= r_max");
    }
    return std::make_unique<SequenceEnv>(len, alpha, std::move(r));
  }
  throw ConfigError("env.kind", "unknown environment '" + kind + "' (expected hypergrid or sequence)");
}

}  // namespace subflow
