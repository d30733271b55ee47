#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kCli = SUBFLOW_CLI_PATH;

struct Result {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Result run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = "\"" + kCli.string() + "\" " + args + " > \"" + log.string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  return r;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("subflow_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

json small_train() {
  return {{"seed", 1},
          {"iterations", 6},
          {"metric_every", 3},
          {"env", {{"kind", "hypergrid"}, {"height", 3}, {"dims", 2}}},
          {"policy", {{"hidden", 16}, {"depth", 1}}},
          {"sampler", {{"batch", 8}}}};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("train writes a run directory and repeats byte for byte") {
    const auto dir = scratch("train");
    const auto cfg = write_config(dir, small_train());
    REQUIRE(run("train --config " + cfg.string() + " --out " + (dir / "a").string(), dir).code == 0);
    REQUIRE(run("train --config " + cfg.string() + " --out " + (dir / "b").string(), dir).code == 0);
    for (const char* f : {"config.json", "metrics.csv", "ckpt_3.bin", "ckpt_6.bin"}) CHECK(fs::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
    CHECK(slurp(dir / "a" / "ckpt_6.bin") == slurp(dir / "b" / "ckpt_6.bin"));
    REQUIRE(run("train --config " + cfg.string() + " --seed 2 --out " + (dir / "c").string(), dir).code == 0);
    CHECK(slurp(dir / "a" / "metrics.csv") != slurp(dir / "c" / "metrics.csv"));
    CHECK(json::parse(slurp(dir / "c" / "config.json"))["seed"] == 2);

    const auto eval = run("evaluate --ckpt " + (dir / "a" / "ckpt_6.bin").string(), dir);
    CHECK(eval.code == 0);
    CHECK(eval.out.rfind("iteration,loss_critic", 0) == 0);
    CHECK(run("evaluate --ckpt " + (dir / "a" / "ckpt_6.bin").string() + " --out " + (dir / "e").string(), dir).code == 0);
    CHECK(fs::exists(dir / "e" / "evaluate.csv"));

    auto other = small_train();
    other["env"]["height"] = 4;
    const auto mismatch = write_config(dir, other, "other.json");
    CHECK(run("evaluate --ckpt " + (dir / "a" / "ckpt_6.bin").string() + " --config " + mismatch.string(), dir).code == 1);
    CHECK(run("oracle --config " + cfg.string() + " --what pf --ckpt " + (dir / "a" / "ckpt_6.bin").string(), dir).code == 0);
    fs::remove_all(dir);
  }

  TEST_CASE("oracle prints Z* and tables") {
    const auto dir = scratch("oracle");
    const auto cfg = write_config(dir, small_train());
    const auto z = run("oracle --config " + cfg.string() + " --what zstar", dir);
    CHECK(z.code == 0);
    // 3x3 rewards: four corners 0.51 and five other cells 0.01
    CHECK(std::stod(z.out) == doctest::Approx(4 * 0.51 + 5 * 0.01).epsilon(1e-12));
    const auto flow = run("oracle --config " + cfg.string() + " --what flow", dir);
    CHECK(flow.out.rfind("cell_0,cell_1,log_flow\n", 0) == 0);
    CHECK(std::count(flow.out.begin(), flow.out.end(), '\n') == 10);
    CHECK(run("oracle --config " + cfg.string() + " --what everything", dir).code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("verify passes, and fails under perturbation") {
    const auto dir = scratch("verify");
    const auto cfg = write_config(dir, small_train());
    const auto ok = run("verify --config " + cfg.string(), dir);
    CHECK(ok.code == 0);
    CHECK(ok.out.find("FAIL") == std::string::npos);
    CHECK(ok.out.find("PASS") != std::string::npos);
    const auto bad = run("verify --config " + cfg.string() + " --perturb-state 4", dir);
    CHECK(bad.code == 1);
    CHECK(bad.out.find("FAIL") != std::string::npos);
    CHECK(run("verify --config " + cfg.string() + " --perturb-state 99", dir).code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("exit codes") {
    const auto dir = scratch("codes");
    CHECK(run("train --config " + write_config(dir, json{{"iterations", 2}}, "noenv.json").string() + " --out " +
                  (dir / "x").string(),
              dir)
              .code == 2);
    CHECK(run("train --config " + (dir / "missing.json").string() + " --out " + (dir / "x").string(), dir).code == 2);
    CHECK(run("train --bogus", dir).code == 2);
    CHECK(run("", dir).code == 2);
    json big = small_train();
    big["env"] = {{"kind", "hypergrid"}, {"height", 64}, {"dims", 4}};
    CHECK(run("oracle --config " + write_config(dir, big, "big.json").string(), dir).code == 3);
    CHECK(run("evaluate --ckpt " + (dir / "missing.bin").string(), dir).code == 1);
    fs::remove_all(dir);
  }
}
