#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "helpers.hpp"
#include "subflow/errors.hpp"
#include "subflow/objectives.hpp"

using namespace subflow;
using namespace subflow::test;

namespace {

Trajectory hand_trajectory() {
  Trajectory t;
  t.actions = {0, 1, 2};
  t.log_pf = {-0.5, -1.0, -0.25};
  t.log_pb = {0.0, -std::log(2.0), 0.0};
  t.terminal_reward = 2.0;
  t.log_reward = std::log(2.0);
  return t;
}

std::vector<std::vector<double>> random_terms(std::mt19937_64& gen, int count) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 6);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(count));
  for (auto& e : out) {
    e.resize(static_cast<std::size_t>(len(gen)));
    for (double& v : e) v = n(gen);
  }
  return out;
}

double fd_worst(PolicyBundle& b, const Environment& env, std::vector<Trajectory>& batch, HeadId id,
                const std::function<double()>& loss, std::span<const double> analytic) {
  auto p = b.params(id);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + 1e-6;
    refresh_log_probs(b, env, batch);
    const double up = loss();
    p[i] = keep - 1e-6;
    refresh_log_probs(b, env, batch);
    const double down = loss();
    p[i] = keep;
    worst = std::max(worst, std::abs((up - down) / 2e-6 - analytic[i]));
  }
  refresh_log_probs(b, env, batch);
  return worst;
}

}  // namespace

TEST_SUITE("objectives") {
  TEST_CASE("pair enumeration") {
    for (int len = 1; len <= 8; ++len) {
      const auto pairs = subtrajectory_pairs(len);
      CHECK(pairs.size() == static_cast<std::size_t>(len * (len + 1) / 2));
      CHECK(pairs.front() == std::pair{0, 1});
      CHECK(pairs.back() == std::pair{len - 1, len});
    }
  }

  TEST_CASE("geometric weights sum to one on every trajectory") {
    for (double lambda : {0.1, 0.5, 0.9, 0.99, 1.0}) {
      for (int len = 1; len <= 20; ++len) {
        WeightScheme w{lambda, WeightKind::kSubtbGeometric};
        double sum = 0.0;
        for (auto [i, j] : subtrajectory_pairs(len)) sum += w.weight(i, j, len);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
    }
    WeightScheme flat{1.0, WeightKind::kSubtbGeometric};
    for (auto [i, j] : subtrajectory_pairs(2)) CHECK(flat.weight(i, j, 2) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(flat.weight(1, 1, 2), ContractError);
  }

  TEST_CASE("edges_only and full_only select DB and TB pairs") {
    WeightScheme db{0.9, WeightKind::kEdgesOnly};
    WeightScheme tb{0.9, WeightKind::kFullOnly};
    CHECK(db.weight(2, 3, 5) == 1.0);
    CHECK(db.weight(2, 4, 5) == 0.0);
    CHECK(tb.weight(0, 5, 5) == 1.0);
    CHECK(tb.weight(0, 4, 5) == 0.0);
    CHECK(parse_weight_kind("edges_only") == WeightKind::kEdgesOnly);
    CHECK(to_string(parse_weight_kind("subtb_geometric")) == "subtb_geometric");
    CHECK_THROWS_AS(parse_weight_kind("uniform"), ConfigError);
  }

  TEST_CASE("edge terms and residuals by hand") {
    const Trajectory t = hand_trajectory();
    const std::vector<double> h{0.3, 0.7, -0.2};
    const auto e = edge_terms(t, h, 0.1);
    CHECK(e[0] == doctest::Approx(-0.5 + 0.3 - 0.0 - 0.7));
    CHECK(e[1] == doctest::Approx(-1.0 + 0.7 + std::log(2.0) + 0.2));
    CHECK(e[2] == doctest::Approx(-0.25 - 0.2 - 0.1));
    CHECK(pair_residual(e, 0, 3) == doctest::Approx(e[0] + e[1] + e[2]));
    // trajectory balance telescopes: log pi_F sum + h(s0) - log pi_B sum - terminal
    CHECK(pair_residual(e, 0, 3) == doctest::Approx(-1.75 + 0.3 + std::log(2.0) - 0.1));
    CHECK(residual_subtb(t, 0, 3, h) == doctest::Approx(-1.75 + 0.3 + std::log(2.0) - std::log(2.0)));
    CHECK(residual_subeb(t, 1, 2, h, 0.0) == doctest::Approx(e[1]));
    CHECK(residual_subeb(t, 0, 3, h, 0.5) == doctest::Approx(residual_subeb(t, 0, 3, h, 0.0) + 0.5));
    CHECK_THROWS_AS(pair_residual(e, 0, 4), ContractError);
    CHECK_THROWS_AS(edge_terms(t, std::vector<double>{0.0}, 0.0), ContractError);
  }

  TEST_CASE("weighted loss by hand and derivatives against differences") {
    const std::vector<std::vector<double>> one{{1.0, 2.0}};
    WeightScheme w{1.0, WeightKind::kSubtbGeometric};
    // pairs (0,1), (1,2), (0,2), each weight 1/3
    const auto g = weighted_pair_loss(one, w);
    CHECK(g.loss == doctest::Approx((1.0 + 4.0 + 9.0) / 3.0));

    std::mt19937_64 gen(17);
    auto terms = random_terms(gen, 12);
    const WeightScheme geo{0.8, WeightKind::kSubtbGeometric};
    const auto grads = weighted_pair_loss(terms, geo);
    double worst = 0.0;
    for (std::size_t n = 0; n < terms.size(); ++n) {
      for (std::size_t k = 0; k < terms[n].size(); ++k) {
        const double keep = terms[n][k];
        terms[n][k] = keep + 1e-6;
        const double up = weighted_pair_loss(terms, geo).loss;
        terms[n][k] = keep - 1e-6;
        const double down = weighted_pair_loss(terms, geo).loss;
        terms[n][k] = keep;
        worst = std::max(worst, std::abs((up - down) / 2e-6 - grads.edge[n][k]));
        // h(s_k) enters e_k with + and e_{k-1} with -
        const double expect = grads.edge[n][k] - (k > 0 ? grads.edge[n][k - 1] : 0.0);
        CHECK(grads.state[n][k] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
    CHECK(worst < 1e-7);
  }

  TEST_CASE("serial and parallel kernels agree bit for bit") {
    std::mt19937_64 gen(4);
    const auto terms = random_terms(gen, 200);
    const WeightScheme w{0.9, WeightKind::kSubtbGeometric};
    const auto a = weighted_pair_loss(terms, w, Exec::kSerial);
    const auto b = weighted_pair_loss(terms, w, Exec::kParallel);
    CHECK(a.loss == b.loss);
    CHECK(a.edge == b.edge);
    const auto c = lambda_td_loss(terms, 0.7, Exec::kSerial);
    const auto d = lambda_td_loss(terms, 0.7, Exec::kParallel);
    CHECK(c.loss == d.loss);
    CHECK(c.state == d.state);
  }

  TEST_CASE("lambda-TD: lambda = 0 is one-step TD; lambda = 1 sums the tail") {
    const std::vector<std::vector<double>> terms{{0.5, -1.0, 2.0}, {1.5}};
    const auto zero = lambda_td_loss(terms, 0.0);
    CHECK(zero.loss == doctest::Approx((0.25 + 1.0 + 4.0 + 2.25) / 2));
    CHECK(zero.state[0][1] == doctest::Approx(2.0 * -1.0 / 2));
    CHECK(zero.edge.empty());
    const auto one = lambda_td_loss(terms, 1.0);
    CHECK(one.loss == doctest::Approx((1.5 * 1.5 + 1.0 + 4.0 + 2.25) / 2));
    CHECK(one.state[0][0] == doctest::Approx(1.5));
  }

  TEST_CASE("loss_weighted routes gradients to the owning heads only") {
    auto env = grid(4, 2);
    PolicyConfig cfg = small_policy(BackwardMode::kLearned, 8, 1);
    cfg.value_head = cfg.backward_value_head = cfg.flow_head = true;
    auto b = bundle(*env, cfg, 3);
    perturb(b, 3, 0.3);
    auto batch = sample_forward(b, *env, 16, {1, 0, 0});
    const WeightScheme w{0.9, WeightKind::kSubtbGeometric};

    BundleGrads subeb(b);
    loss_weighted(b, *env, batch, ResidualKind::kSubeb, w, subeb);
    CHECK_FALSE(subeb[HeadId::kValue].empty());
    CHECK(subeb.norm(ParamSet::kPhi) > 0.0);
    CHECK(subeb.all_zero(ParamSet::kTheta));

    BundleGrads subtb(b);
    loss_weighted(b, *env, batch, ResidualKind::kSubtb, w, subtb);
    CHECK(subtb.norm(ParamSet::kTheta) > 0.0);
    for (double v : subtb[HeadId::kValue]) CHECK(v == 0.0);
    for (double v : subtb[HeadId::kBackwardValue]) CHECK(v == 0.0);

    BundleGrads back(b);
    loss_weighted(b, *env, batch, ResidualKind::kSubebBackward, w, back);
    CHECK(back.all_zero(ParamSet::kPhi));
    for (double v : back[HeadId::kFlow]) CHECK(v == 0.0);

    BundleGrads td(b);
    loss_lambda_td(b, *env, batch, 0.9, td);
    CHECK(td.all_zero(ParamSet::kTheta));
    for (double v : td[HeadId::kBackward]) CHECK(v == 0.0);
    CHECK(td.norm(ParamSet::kPhi) > 0.0);
  }

  TEST_CASE("loss_weighted gradients match finite differences") {
    auto env = grid(4, 2);
    PolicyConfig cfg = small_policy(BackwardMode::kLearned, 6, 1);
    cfg.flow_head = true;
    auto b = bundle(*env, cfg, 8);
    perturb(b, 8, 0.3);
    auto batch = sample_forward(b, *env, 8, {2, 0, 0});
    const WeightScheme w{0.9, WeightKind::kSubtbGeometric};
    for (auto kind : {ResidualKind::kSubeb, ResidualKind::kSubtb}) {
      BundleGrads g(b);
      loss_weighted(b, *env, batch, kind, w, g);
      auto loss = [&] {
        BundleGrads scratch(b);
        return loss_weighted(b, *env, batch, kind, w, scratch).loss;
      };
      const HeadId head = residual_head(kind);
      CHECK(fd_worst(b, *env, batch, head, loss, g[head]) < 1e-6);
      CHECK(fd_worst(b, *env, batch, HeadId::kBackward, loss, g[HeadId::kBackward]) < 1e-6);
      if (kind == ResidualKind::kSubtb) {
        CHECK(fd_worst(b, *env, batch, HeadId::kForward, loss, g[HeadId::kForward]) < 1e-6);
      }
    }
  }

  TEST_CASE("Sub-TB residuals vanish at the true flow and optimal policy") {
    auto env = grid(3, 2);
    const auto g = StateGraph::build(*env);
    std::mt19937_64 gen(6);
    PolicyTables t{random_forward(g, gen), random_backward(g, gen)};
    const auto flow = dp_true_flow(g, t);
    t.log_pf = optimal_forward(g, t, flow);
    double worst = 0.0;
    double doubled_interior = 0.0;
    double doubled_terminal = 0.0;
    for (const auto& e : enumerate_trajectories(g, t)) {
      const Trajectory tr = to_trajectory(g, *env, e);
      std::vector<double> lf;
      for (int s : e.states) lf.push_back(flow.log_flow[static_cast<std::size_t>(s)]);
      std::vector<double> twice = lf;
      for (double& v : twice) v += std::log(2.0);
      for (auto [i, j] : subtrajectory_pairs(tr.length())) {
        worst = std::max(worst, std::abs(residual_subtb(tr, i, j, lf)));
        const double d = residual_subtb(tr, i, j, twice);
        if (j < tr.length()) {
          doubled_interior = std::max(doubled_interior, std::abs(d));
        } else {
          doubled_terminal = std::max(doubled_terminal, std::abs(d - std::log(2.0)));
        }
      }
    }
    CHECK(worst < 1e-12);
    CHECK(doubled_interior < 1e-12);
    CHECK(doubled_terminal < 1e-12);
  }

  TEST_CASE("a non-finite residual names its trajectory and pair") {
    auto env = grid(4, 2);
    PolicyConfig cfg = small_policy();
    auto b = bundle(*env, cfg);
    auto batch = sample_forward(b, *env, 4, {0, 0, 0});
    batch[2].log_pf[0] = std::nan("");
    BundleGrads g(b);
    try {
      loss_weighted(b, *env, batch, ResidualKind::kSubeb, WeightScheme{}, g);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("trajectory 2") != std::string::npos);
    }
  }
}
