#include <doctest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "subflow/errors.hpp"

using namespace subflow;
using subflow::test::grid;
using subflow::test::sequence;

namespace {

State cells(std::vector<int> c, int step) {
  State s;
  s.cells = std::move(c);
  s.step = step;
  return s;
}

std::set<std::pair<std::vector<int>, Action>> parent_set(const Environment& env, const State& s) {
  std::set<std::pair<std::vector<int>, Action>> out;
  for (const auto& p : env.parents(s)) {
    out.insert({p.parent.cells, p.action});
  }
  return out;
}

}  // namespace

TEST_SUITE("env") {
  TEST_CASE("hypergrid step increments one coordinate or terminates") {
    auto env = grid(8, 2);
    const State s = cells({3, 5}, 8);
    CHECK(env->step(s, 0).cells == std::vector<int>{4, 5});
    const State f = env->step(s, env->terminate_action());
    CHECK(f.final);
    CHECK(env->is_terminating(s));
    CHECK_THROWS_AS(env->step(cells({7, 0}, 7), 0), ContractError);
  }

  TEST_CASE("sequence prepend shifts blocks right") {
    auto env = sequence(4, 3);
    const State s = cells({0, 1, -1, -1}, 2);
    const Action prepend2 = 3 + 2;
    CHECK(env->step(s, prepend2).cells == std::vector<int>{2, 0, 1, -1});
    CHECK(env->step(s, 1).cells == std::vector<int>{0, 1, 1, -1});
  }

  TEST_CASE("hypergrid parents") {
    auto env = grid(8, 2);
    CHECK(parent_set(*env, cells({1, 0}, 1)) == std::set<std::pair<std::vector<int>, Action>>{{{0, 0}, 0}});
    CHECK(parent_set(*env, cells({1, 1}, 2)) ==
          std::set<std::pair<std::vector<int>, Action>>{{{0, 1}, 0}, {{1, 0}, 1}});
    CHECK(env->parents(env->initial()).empty());
    auto small = grid(3, 2);
    const auto sf_parents = small->parents(small->final_state());
    CHECK(sf_parents.size() == 9);
  }

  TEST_CASE("hypergrid reward table") {
    auto env = grid(8, 2);
    CHECK(env->reward(cells({0, 0}, 0)) == doctest::Approx(0.51).epsilon(1e-15));
    // |1/7 - 0.5| = 0.357 in (0.3, 0.4] on both axes
    CHECK(env->reward(cells({1, 6}, 7)) == doctest::Approx(2.51).epsilon(1e-15));
    auto odd = grid(9, 2);
    CHECK(odd->reward(cells({4, 4}, 8)) == doctest::Approx(0.01).epsilon(1e-15));
  }

  TEST_CASE("hypergrid encoding is K-hot") {
    auto env = grid(4, 2);
    CHECK(env->encode(cells({1, 3}, 4)) == std::vector<double>{0, 1, 0, 0, 0, 0, 0, 1});
    CHECK(env->encode(env->initial()) == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0});
  }

  TEST_CASE("acyclicity, duality, positivity and injectivity over small envs") {
    std::vector<std::unique_ptr<Environment>> envs;
    envs.push_back(grid(8, 2));
    envs.push_back(grid(3, 3));
    envs.push_back(sequence(3, 2));
    envs.push_back(sequence(4, 3));
    for (const auto& env : envs) {
      CAPTURE(env->name());
      const auto states = env->enumerate_states();
      REQUIRE(states.size() == *env->state_count());
      std::set<std::vector<double>> codes;
      std::set<std::uint64_t> keys;
      for (std::size_t i = 0; i < states.size(); ++i) {
        const State& s = states[i];
        if (i > 0) {
          CHECK(states[i - 1].step <= s.step);  // enumeration order is a topological order
        }
        codes.insert(env->encode(s));
        keys.insert(env->key(s));
        const auto mask = env->valid_actions(s);
        for (Action a = 0; a < env->action_count(); ++a) {
          if (!mask[static_cast<std::size_t>(a)] || a == env->terminate_action()) {
            continue;
          }
          const State child = env->step(s, a);
          CHECK(child.step == s.step + 1);
          const auto ps = env->parents(child);
          CHECK(std::any_of(ps.begin(), ps.end(), [&](const ParentEdge& p) { return p.action == a && p.parent == s; }));
          CHECK(env->parent_via(child, a) == s);
        }
        if (env->is_terminating(s)) {
          CHECK(env->reward(s) >= 1e-3);
          CHECK(env->reward(s) > 0.0);
        }
      }
      CHECK(codes.size() == states.size());
      CHECK(keys.size() == states.size());
      CHECK(!keys.contains(env->key(env->final_state())));
    }
  }

  TEST_CASE("sequence padding has its own encoding slot") {
    auto env = sequence(3, 2);
    const auto code = env->encode(cells({1, -1, -1}, 1));
    CHECK(code == std::vector<double>{0, 0, 1, 1, 0, 0, 1, 0, 0});
  }

  TEST_CASE("enumeration refuses above the cap") {
    auto env = grid(64, 4);
    CHECK_FALSE(env->enumerable());
    CHECK_THROWS_AS(env->enumerate_states(), CapabilityError);
    CHECK(grid(8, 2)->enumerable(64));
    CHECK_FALSE(grid(8, 2)->enumerable(63));
  }

  TEST_CASE("config errors name the key") {
    auto path_of = [](const nlohmann::json& j) {
      try {
        make_environment(j);
      } catch (const ConfigError& e) {
        return e.path();
      }
      return std::string("none");
    };
    CHECK(path_of(nlohmann::json::object()) == "env.kind");
    CHECK(path_of({{"kind", "hypergrid"}, {"height", 1}}) == "env.height");
    CHECK(path_of({{"kind", "hypergrid"}, {"dims", "two"}}) == "env.dims");
    CHECK(path_of({{"kind", "sequence"}, {"beta", -1}}) == "env.beta");
    CHECK(path_of({{"kind", "maze"}}) == "env.kind");
    CHECK(path_of({{"kind", "hypergrid"}, {"hieght", 3}}) == "env.hieght");
    CHECK(path_of({{"kind", "hypergrid"}, {"reward", {{"r3", 1.0}}}}) == "env.reward.r3");
    CHECK(path_of({{"kind", "sequence"}, {"length", 3}}) == "env.length");
  }

  TEST_CASE("describe round-trips through make_environment") {
    for (const auto& env : {grid(5, 3), sequence(3, 2)}) {
      const auto again = make_environment(env->describe());
      CHECK(again->describe() == env->describe());
      for (const State& s : env->enumerate_states()) {
        if (env->is_terminating(s)) {
          CHECK(again->reward(s) == env->reward(s));
        }
      }
    }
  }
}
