#pragma once

#include <cmath>
#include <memory>
#include <random>

#include <nlohmann/json.hpp>

#include "subflow/env.hpp"
#include "subflow/hypergrid.hpp"
#include "subflow/oracle.hpp"
#include "subflow/policy.hpp"
#include "subflow/sequence.hpp"

namespace subflow::test {

inline std::unique_ptr<Environment> grid(int height, int dims) {
  return make_environment({{"kind", "hypergrid"}, {"height", height}, {"dims", dims}});
}

inline std::unique_ptr<Environment> sequence(int len, int alphabet) {
  return make_environment({{"kind", "sequence"}, {"seq_len", len}, {"alphabet", alphabet}});
}

inline PolicyConfig small_policy(BackwardMode backward = BackwardMode::kUniform, int hidden = 16, int depth = 2) {
  PolicyConfig c;
  c.backward = backward;
  c.hidden = hidden;
  c.depth = depth;
  return c;
}

inline PolicyBundle bundle(const Environment& env, PolicyConfig cfg, std::uint64_t seed = 1) {
  std::mt19937_64 gen(seed);
  return PolicyBundle::create(env, cfg, gen);
}

/// Adds Gaussian noise to every network parameter.
inline void perturb(PolicyBundle& b, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (int h = 0; h < kHeadCount; ++h) {
    const auto id = static_cast<HeadId>(h);
    if (!b.has(id) || id == HeadId::kLogZ) {
      continue;
    }
    for (double& p : b.params(id)) {
      p += n(gen);
    }
  }
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace subflow::test
