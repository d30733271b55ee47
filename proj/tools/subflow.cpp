// subflow: train, evaluate, oracle and verify over JSON configs.
//
// Exit codes: 0 success, 1 runtime abort, 2 config error, 3 capability error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <omp.h>

#include "subflow/checkpoint.hpp"
#include "subflow/errors.hpp"
#include "subflow/oracle.hpp"
#include "subflow/trainer.hpp"
#include "subflow/verify.hpp"

namespace fs = std::filesystem;
using namespace subflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCapability = 3;

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  std::string what = "zstar";
  std::string ckpt;
  std::optional<int> perturb_state;
};

nlohmann::json read_config(const Args& a) {
  if (a.config.empty()) {
    throw ConfigError("--config", "required");
  }
  std::ifstream in(a.config);
  if (!in) {
    throw ConfigError("--config", "cannot open " + a.config);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) {
    throw ConfigError("<root>", "expected an object");
  }
  if (a.seed) {
    j["seed"] = *a.seed;
  }
  return j;
}

const nlohmann::json& env_section(const nlohmann::json& j) {
  if (!j.contains("env")) {
    throw ConfigError("env.kind", "missing required key");
  }
  return j.at("env");
}

// Writes to --out/<name> when --out is set, stdout otherwise.
void emit(const Args& a, const std::string& name, const std::string& text) {
  if (a.out.empty()) {
    std::cout << text;
    return;
  }
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / name) << text;
}

int cmd_train(const Args& a) {
  const TrainConfig cfg = parse_train_config(read_config(a));
  if (a.out.empty()) {
    throw ConfigError("--out", "train needs an output directory");
  }
  Trainer trainer(cfg);
  trainer.run(a.out, a.verbose ? &std::cerr : nullptr);
  if (a.verbose) {
    std::cerr << "done: " << trainer.iteration() << " iterations, " << trainer.skipped() << " skipped\n";
  }
  return kExitOk;
}

int cmd_evaluate(const Args& a) {
  if (a.ckpt.empty()) {
    throw ConfigError("--ckpt", "required");
  }
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const nlohmann::json env_cfg = a.config.empty() ? ck.meta.at("env") : env_section(read_config(a));
  const auto env = make_environment(env_cfg);
  const MetricsRow row = evaluate_checkpoint(ck, *env, kDefaultEnumerationCap, a.seed.value_or(0));
  emit(a, "evaluate.csv", std::string(kMetricsHeader) + "\n" + format_row(row) + "\n");
  return kExitOk;
}

std::string state_table(const StateGraph& g, const std::vector<int>& rows, std::span<const double> values,
                        const std::string& column) {
  std::ostringstream out;
  out.precision(17);
  const std::size_t width = g.states.empty() ? 0 : g.states.front().cells.size();
  for (std::size_t c = 0; c < width; ++c) {
    out << "cell_" << c << ',';
  }
  out << column << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int cell : g.states[static_cast<std::size_t>(rows[r])].cells) {
      out << cell << ',';
    }
    out << values[r] << '\n';
  }
  return out.str();
}

int cmd_oracle(const Args& a) {
  const nlohmann::json j = read_config(a);
  const auto env = make_environment(env_section(j));
  const StateGraph g = StateGraph::build(*env);
  PolicyTables t{uniform_forward(g), uniform_backward(g)};
  if (!a.ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    require_checkpoint_fits(ck, *env);
    t = tables_from_bundle(g, *env, ck.bundle);
  }
  std::vector<int> all(static_cast<std::size_t>(g.size()));
  for (int s = 0; s < g.size(); ++s) {
    all[static_cast<std::size_t>(s)] = s;
  }
  const FlowTable flow = dp_true_flow(g, t);
  std::ostringstream out;
  out.precision(17);
  if (a.what == "zstar") {
    out << std::exp(flow.log_z_star) << '\n';
    emit(a, "zstar.txt", out.str());
  } else if (a.what == "flow") {
    emit(a, "flow.csv", state_table(g, all, flow.log_flow, "log_flow"));
  } else if (a.what == "pf") {
    const DistTable d = dp_forward_terminal_dist(g, t);
    emit(a, "pf.csv", state_table(g, d.terminals, d.prob, "prob"));
  } else if (a.what == "target") {
    const DistTable d = target_dist(g);
    emit(a, "target.csv", state_table(g, d.terminals, d.prob, "prob"));
  } else if (a.what == "vdagger") {
    emit(a, "vdagger.csv", state_table(g, all, dp_v_dagger(g, t, 0.0), "v_dagger"));
  } else if (a.what == "wdagger") {
    emit(a, "wdagger.csv", state_table(g, all, dp_w_dagger(g, t, flow.log_z_star), "w_dagger"));
  } else {
    throw ConfigError("--what", "expected zstar, flow, pf, target, vdagger or wdagger");
  }
  return kExitOk;
}

int cmd_verify(const Args& a) {
  const nlohmann::json j = read_config(a);
  const auto env = make_environment(env_section(j));
  VerifyOptions opt;
  opt.seed = a.seed.value_or(j.value("seed", std::uint64_t{0}));
  opt.perturb_state = a.perturb_state;
  if (opt.perturb_state) {
    const StateGraph g = StateGraph::build(*env);
    if (*opt.perturb_state < 0 || *opt.perturb_state >= g.size()) {
      throw ConfigError("--perturb-state", "state index out of range [0, " + std::to_string(g.size()) + ")");
    }
  }
  bool ok = true;
  for (const CheckResult& r : verify_all(*env, opt)) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": max residual " << r.value << " (tol "
              << r.tolerance << "); " << r.detail << '\n';
    ok = ok && r.pass;
  }
  return ok ? kExitOk : kExitRuntime;
}

void cap_threads() {
  if (const char* v = std::getenv("SUBFLOW_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) {
      omp_set_num_threads(n);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subflow: policy-based GFlowNet training and exact oracles"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", a.config, "JSON config file");
    if (needs_config) {
      c->required();
    }
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--seed", a.seed, "seed override");
    sub->add_flag("--verbose,-v", a.verbose, "progress on stderr");
  };
  auto* train = app.add_subcommand("train", "run the configured workflow");
  common(train, true);
  auto* evaluate = app.add_subcommand("evaluate", "metrics of a checkpoint");
  common(evaluate, false);
  evaluate->add_option("--ckpt", a.ckpt, "checkpoint file")->required();
  auto* oracle = app.add_subcommand("oracle", "dump exact DP tables as CSV");
  common(oracle, true);
  oracle->add_option("--what", a.what, "zstar, flow, pf, target, vdagger or wdagger");
  oracle->add_option("--ckpt", a.ckpt, "take pi_F and pi_B from a checkpoint instead of uniform");
  auto* verify = app.add_subcommand("verify", "exact balance checks");
  common(verify, true);
  verify->add_option("--perturb-state", a.perturb_state, "add 0.1 to V+ at this state index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  cap_threads();
  try {
    if (*train) {
      return cmd_train(a);
    }
    if (*evaluate) {
      return cmd_evaluate(a);
    }
    if (*oracle) {
      return cmd_oracle(a);
    }
    return cmd_verify(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << '\n';
    return kExitCapability;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
