#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "subflow/checkpoint.hpp"
#include "subflow/errors.hpp"
#include "subflow/trainer.hpp"

using namespace subflow;
using namespace subflow::test;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_run(const std::string& workflow, int iterations = 10) {
  json j = {{"seed", 3},
            {"workflow", workflow},
            {"iterations", iterations},
            {"metric_every", 2},
            {"env", {{"kind", "hypergrid"}, {"height", 3}, {"dims", 2}}},
            {"policy", {{"hidden", 16}, {"depth", 2}}},
            {"sampler", {{"batch", 16}}}};
  if (workflow == "offline_pg") j["policy"]["backward"] = "learned";
  return j;
}

std::string config_error_path(const json& j) {
  try {
    parse_train_config(j);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "none";
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("subflow_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<double> copy(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("config defaults and heads by workflow") {
    const auto c = parse_train_config(json{{"env", {{"kind", "hypergrid"}}}});
    CHECK(c.workflow == Workflow::kOnlinePg);
    CHECK(c.critic == CriticKind::kSubeb);
    CHECK(c.gamma == 0.99);
    CHECK(c.batch == 128);
    CHECK(c.scheme.lambda == 0.9);
    CHECK(c.policy.hidden == 256);
    CHECK(c.policy.depth == 4);
    CHECK(c.policy.value_head);
    CHECK_FALSE(c.policy.flow_head);
    const auto s = parse_train_config(json{{"workflow", "subtb"}, {"env", {{"kind", "hypergrid"}}}});
    CHECK(s.critic == CriticKind::kSubtb);
    CHECK(s.policy.flow_head);
    CHECK_FALSE(s.policy.value_head);
    const auto o = parse_train_config(json{{"workflow", "offline_pg"}, {"env", {{"kind", "hypergrid"}}}});
    CHECK(o.policy.backward_value_head);
  }

  TEST_CASE("config errors name the dotted key") {
    const json env = {{"kind", "hypergrid"}};
    CHECK(config_error_path(json::object()) == "env.kind");
    CHECK(config_error_path({{"env", env}, {"objective", {{"lamda", 0.9}}}}) == "objective.lamda");
    CHECK(config_error_path({{"env", env}, {"epochs", 3}}) == "epochs");
    CHECK(config_error_path({{"env", env}, {"actor", {{"gamma", 1.5}}}}) == "actor.gamma");
    CHECK(config_error_path({{"env", env}, {"sampler", {{"batch", "many"}}}}) == "sampler.batch");
    CHECK(config_error_path({{"env", env}, {"workflow", "offline_pg"}, {"objective", {{"kind", "lambda_td"}}}}) ==
          "objective.kind");
    CHECK(config_error_path({{"env", env}, {"workflow", "subtb"}, {"policy", {{"use_logz", true}}}}) ==
          "policy.use_logz");
    CHECK(config_error_path({{"env", {{"kind", "hypergrid"}, {"height", 0}}}}) == "env.height");
  }

  TEST_CASE("config snapshot round-trips") {
    auto j = small_run("online_pg");
    j["objective"] = {{"kind", "lambda_td"}, {"lambda", 0.5}};
    const auto c = parse_train_config(j);
    const auto again = parse_train_config(to_json(c));
    CHECK(to_json(again) == to_json(c));
    CHECK(again.critic == CriticKind::kLambdaTd);
  }

  TEST_CASE("metrics rows round-trip and leave optional cells empty") {
    MetricsRow r;
    r.iteration = 40;
    r.loss_critic = 0.125;
    r.grad_norm_actor = 1.0 / 3.0;
    r.mean_reward = 0.51;
    r.alpha = 0.99;
    const auto line = format_row(r);
    CHECK(std::count(line.begin(), line.end(), ',') == 8);
    CHECK(line.find(",,,") != std::string::npos);
    CHECK(line.back() == ',');
    const auto back = parse_row(line);
    CHECK(back.iteration == 40);
    CHECK(back.grad_norm_actor == r.grad_norm_actor);
    CHECK_FALSE(back.d_tv.has_value());
    CHECK(back.alpha == 0.99);
    CHECK_FALSE(back.wall_clock_ms.has_value());
    CHECK(std::string(kMetricsHeader).find("iteration,loss_critic") == 0);
  }

  TEST_CASE("the same seed gives identical runs") {
    for (const char* wf : {"online_pg", "offline_pg", "subtb"}) {
      CAPTURE(wf);
      Trainer a(parse_train_config(small_run(wf)));
      Trainer b(parse_train_config(small_run(wf)));
      const auto ra = a.run();
      const auto rb = b.run();
      REQUIRE(ra.size() == rb.size());
      for (std::size_t i = 0; i < ra.size(); ++i) CHECK(format_row(ra[i]) == format_row(rb[i]));
      auto other = small_run(wf);
      other["seed"] = 4;
      Trainer c(parse_train_config(other));
      CHECK(format_row(c.run().back()) != format_row(ra.back()));
    }
  }

  TEST_CASE("update flags freeze the other parameter set bit for bit") {
    auto j = small_run("online_pg", 5);
    j["update_theta"] = false;
    Trainer frozen_theta(parse_train_config(j));
    const auto pf = copy(frozen_theta.bundle().params(HeadId::kForward));
    const auto v = copy(frozen_theta.bundle().params(HeadId::kValue));
    frozen_theta.run();
    CHECK(copy(frozen_theta.bundle().params(HeadId::kForward)) == pf);
    CHECK(copy(frozen_theta.bundle().params(HeadId::kValue)) != v);

    j["update_theta"] = true;
    j["update_phi"] = false;
    Trainer frozen_phi(parse_train_config(j));
    frozen_phi.run();
    CHECK(copy(frozen_phi.bundle().params(HeadId::kValue)) == v);
    CHECK(copy(frozen_phi.bundle().params(HeadId::kForward)) != pf);
  }

  TEST_CASE("the critic steps before the actor within an iteration") {
    Trainer t(parse_train_config(small_run("online_pg", 3)));
    int calls = 0;
    std::vector<double> v_before, pf_before;
    t.on_between_steps = [&](const Trainer& tr) {
      ++calls;
      CHECK(copy(tr.bundle().params(HeadId::kValue)) != v_before);
      CHECK(copy(tr.bundle().params(HeadId::kForward)) == pf_before);
    };
    for (int i = 0; i < 3; ++i) {
      v_before = copy(t.bundle().params(HeadId::kValue));
      pf_before = copy(t.bundle().params(HeadId::kForward));
      CHECK(t.step());
      CHECK(copy(t.bundle().params(HeadId::kForward)) != pf_before);
    }
    CHECK(calls == 3);
  }

  TEST_CASE("alpha follows alpha0 * decay^n exactly") {
    auto j = small_run("offline_pg", 12);
    j["sampler"]["alpha0"] = 0.8;
    j["sampler"]["alpha_decay"] = 0.9;
    Trainer t(parse_train_config(j));
    for (const auto& r : t.run()) {
      REQUIRE(r.alpha.has_value());
      CHECK(*r.alpha == 0.8 * std::pow(0.9, r.iteration));
    }
    Trainer online(parse_train_config(small_run("online_pg", 2)));
    CHECK_FALSE(online.run().back().alpha.has_value());
  }

  TEST_CASE("non-finite iterations are skipped, then the run aborts") {
    Trainer t(parse_train_config(small_run("online_pg", 20)));
    auto v = t.bundle().params(HeadId::kValue);
    v[v.size() - 1] = std::nan("");
    const auto pf = copy(t.bundle().params(HeadId::kForward));
    for (int i = 0; i < 10; ++i) CHECK_FALSE(t.step());
    CHECK(t.skipped() == 10);
    CHECK(copy(t.bundle().params(HeadId::kForward)) == pf);
    CHECK_THROWS_AS(t.step(), RunAborted);
  }

  TEST_CASE("run directory layout") {
    const auto dir = scratch("layout");
    auto j = small_run("online_pg", 5);
    j["checkpoint_every"] = 2;
    Trainer t(parse_train_config(j));
    t.run(dir);
    CHECK(fs::exists(dir / "config.json"));
    for (const char* f : {"ckpt_2.bin", "ckpt_4.bin", "ckpt_5.bin"}) CHECK(fs::exists(dir / f));
    std::ifstream csv(dir / "metrics.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == kMetricsHeader);
    std::vector<int> iters;
    while (std::getline(csv, line)) iters.push_back(parse_row(line).iteration);
    CHECK(iters == std::vector<int>{2, 4, 5});
    std::ifstream cfg(dir / "config.json");
    CHECK(parse_train_config(json::parse(cfg)).iterations == 5);
    fs::remove_all(dir);
  }

  TEST_CASE("checkpoints round-trip and reject corruption") {
    const auto dir = scratch("ckpt");
    Trainer t(parse_train_config(small_run("online_pg", 3)));
    t.run();
    save_checkpoint(dir / "a.bin", t.checkpoint_meta(), t.bundle());
    const auto ck = load_checkpoint(dir / "a.bin");
    CHECK(ck.meta["iteration"] == 3);
    for (HeadId id : {HeadId::kForward, HeadId::kValue}) {
      CHECK(copy(ck.bundle.params(id)) == copy(t.bundle().params(id)));
    }
    CHECK(ck.bundle.net(HeadId::kForward).widths() == t.bundle().forward.widths());

    const auto size = fs::file_size(dir / "a.bin");
    fs::copy_file(dir / "a.bin", dir / "short.bin");
    fs::resize_file(dir / "short.bin", size - 5);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), ContractError);
    {
      std::fstream f(dir / "a.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.put('X');
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "a.bin"), ContractError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), ContractError);

    auto other = grid(4, 2);
    CHECK_THROWS_AS(require_checkpoint_fits(ck, *other), ContractError);
    require_checkpoint_fits(ck, t.env());
    fs::remove_all(dir);
  }

  TEST_CASE("evaluation is pure and exact on enumerable envs") {
    Trainer t(parse_train_config(small_run("online_pg", 3)));
    t.run();
    const auto before = copy(t.bundle().params(HeadId::kForward));
    const Checkpoint ck{t.checkpoint_meta(), t.bundle()};
    const auto a = evaluate_checkpoint(ck, t.env());
    const auto b = evaluate_checkpoint(ck, t.env());
    CHECK(format_row(a) == format_row(b));
    CHECK(copy(t.bundle().params(HeadId::kForward)) == before);
    REQUIRE(a.d_tv.has_value());
    const auto g = StateGraph::build(t.env());
    const auto exact = metric_tv(dp_forward_terminal_dist(g, tables_from_bundle(g, t.env(), t.bundle())), target_dist(g));
    CHECK(*a.d_tv == doctest::Approx(exact).epsilon(1e-12));
    CHECK(*a.d_jsd >= 0.0);
    CHECK(*a.mode_accuracy <= 1.0);
  }

  TEST_CASE("a large env reports sampled reward only") {
    auto j = small_run("online_pg", 1);
    j["env"] = {{"kind", "hypergrid"}, {"height", 64}, {"dims", 4}};
    Trainer t(parse_train_config(j));
    CHECK(t.graph() == nullptr);
    const auto rows = t.run();
    CHECK_FALSE(rows.back().d_tv.has_value());
    CHECK(rows.back().mean_reward > 0.0);
  }
}

namespace {

// Writes per-state tables into linear heads over one-hot inputs (1-D grid).
void inject_linear(Approximator& net, const StateGraph& g, const LogTable& rows) {
  auto& p = net.parameters();
  std::fill(p.begin(), p.end(), 0.0);
  const int in = net.input_width();
  for (int s = 0; s < g.size(); ++s) {
    const int cell = g.states[static_cast<std::size_t>(s)].cells[0];
    for (std::size_t a = 0; a < rows[static_cast<std::size_t>(s)].size(); ++a) {
      const double v = rows[static_cast<std::size_t>(s)][a];
      p[a * static_cast<std::size_t>(in) + static_cast<std::size_t>(cell)] = std::isfinite(v) ? v : 0.0;
    }
  }
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("a fresh checkpoint is uniform over the two terminals of a 2-cell line") {
    auto j = small_run("online_pg", 1);
    j["env"] = {{"kind", "hypergrid"}, {"height", 2}, {"dims", 1}};
    Trainer t(parse_train_config(j));
    t.bundle().forward.zero_output_layer();
    const auto row = evaluate_checkpoint(Checkpoint{t.checkpoint_meta(), t.bundle()}, t.env());
    // both cells have reward 0.51, so uniform is already the target
    CHECK(*row.d_tv == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("oracle-optimal tables injected into a checkpoint evaluate to D_TV = 0") {
    auto j = small_run("subtb", 1);
    j["env"] = {{"kind", "hypergrid"}, {"height", 6}, {"dims", 1}};
    j["policy"] = {{"depth", 0}, {"backward", "learned"}};
    Trainer t(parse_train_config(j));
    const auto* g = t.graph();
    REQUIRE(g != nullptr);
    const PolicyTables tables{uniform_forward(*g), uniform_backward(*g)};
    const auto flow = dp_true_flow(*g, tables);
    inject_linear(t.bundle().forward, *g, optimal_forward(*g, tables, flow));
    const auto row = evaluate_checkpoint(Checkpoint{t.checkpoint_meta(), t.bundle()}, t.env());
    CHECK(std::abs(*row.d_tv) < 1e-9);
    CHECK(*row.mode_accuracy == doctest::Approx(1.0).epsilon(1e-12));

    // Sub-TB at (F*, pi_F*): zero loss and zero gradients
    LogTable log_f(static_cast<std::size_t>(g->size()));
    for (int s = 0; s < g->size(); ++s) log_f[static_cast<std::size_t>(s)] = {flow.log_flow[static_cast<std::size_t>(s)]};
    inject_linear(*t.bundle().flow, *g, log_f);
    t.bundle().backward->zero_output_layer();
    const auto batch = sample_forward(t.bundle(), t.env(), 32, {0, 0, 0});
    BundleGrads grads(t.bundle());
    const auto report = loss_weighted(t.bundle(), t.env(), batch, ResidualKind::kSubtb, WeightScheme{}, grads);
    CHECK(report.loss < 1e-24);
    CHECK(grads.norm(ParamSet::kTheta) < 1e-10);
    CHECK(grads.norm(ParamSet::kPhi) < 1e-10);
  }

  TEST_CASE("a 2x2 subtb run reaches D_TV < 0.05 in 200 iterations") {
    auto j = small_run("subtb", 200);
    j["env"]["height"] = 2;
    j["metric_every"] = 200;
    j["sampler"]["batch"] = 128;
    Trainer t(parse_train_config(j));
    CHECK(*t.run().back().d_tv < 0.05);
  }
}
