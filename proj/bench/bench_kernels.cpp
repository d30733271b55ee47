// Serial reference vs OpenMP kernels: DP sweeps, pair expectations,
// residual losses and the actor estimator.

#include <benchmark/benchmark.h>

#include <random>

#include "subflow/actor.hpp"
#include "subflow/objectives.hpp"
#include "subflow/oracle.hpp"

using namespace subflow;

namespace {

Exec mode(const benchmark::State& s) { return s.range(0) == 0 ? Exec::kSerial : Exec::kParallel; }

struct Grid {
  std::unique_ptr<Environment> env;
  StateGraph g;
  PolicyTables t;

  explicit Grid(int height) : env(make_environment({{"kind", "hypergrid"}, {"height", height}, {"dims", 2}})) {
    g = StateGraph::build(*env);
    std::mt19937_64 gen(1);
    t.log_pf = random_forward(g, gen);
    t.log_pb = random_backward(g, gen);
  }
};

const Grid& grid64() {
  static const Grid g(64);
  return g;
}

void BM_TrueFlow(benchmark::State& s) {
  const auto& gr = grid64();
  for (auto _ : s) benchmark::DoNotOptimize(dp_true_flow(gr.g, gr.t, mode(s)));
}

void BM_VDagger(benchmark::State& s) {
  const auto& gr = grid64();
  for (auto _ : s) benchmark::DoNotOptimize(dp_v_dagger(gr.g, gr.t, 0.0, mode(s)));
}

void BM_PairExpectations(benchmark::State& s) {
  static const Grid gr(16);
  const auto v = dp_v_dagger(gr.g, gr.t);
  for (auto _ : s) benchmark::DoNotOptimize(forward_pair_expectations(gr.g, gr.t, v, 0.0, mode(s)));
}

std::vector<std::vector<double>> random_terms(int count, int length) {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(count), std::vector<double>(static_cast<std::size_t>(length)));
  for (auto& e : out) {
    for (double& v : e) v = n(gen);
  }
  return out;
}

void BM_WeightedPairLoss(benchmark::State& s) {
  const auto terms = random_terms(128, 15);
  const WeightScheme w;
  for (auto _ : s) benchmark::DoNotOptimize(weighted_pair_loss(terms, w, mode(s)));
}

void BM_LambdaTd(benchmark::State& s) {
  const auto terms = random_terms(128, 15);
  for (auto _ : s) benchmark::DoNotOptimize(lambda_td_loss(terms, 0.9, mode(s)));
}

void BM_ActorForward(benchmark::State& s) {
  auto env = make_environment({{"kind", "hypergrid"}, {"height", 8}, {"dims", 2}});
  PolicyConfig cfg;
  cfg.hidden = 64;
  cfg.depth = 2;
  std::mt19937_64 gen(3);
  const auto b = PolicyBundle::create(*env, cfg, gen);
  const auto batch = sample_forward(b, *env, 128, {0, 0, 0});
  for (auto _ : s) benchmark::DoNotOptimize(grad_actor_forward(b, *env, batch, 0.99, {}, mode(s)));
}

}  // namespace

BENCHMARK(BM_TrueFlow)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_VDagger)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_PairExpectations)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_WeightedPairLoss)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LambdaTd)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ActorForward)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
