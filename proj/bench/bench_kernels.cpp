// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <random>

#include <benchmark/benchmark.h>

#include "tmpo/flow_net.hpp"
#include "tmpo/metrics.hpp"
#include "tmpo/tree_sampler.hpp"

namespace {

using namespace tmpo;

SampleSet random_points(std::size_t n) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<double> flat(2 * n);
  for (double& v : flat) v = g(rng);
  return SampleSet(flat, 2);
}

void BM_LgmdSerial(benchmark::State& st) {
  const auto s = random_points(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(lgmd_serial(s));
}
void BM_LgmdParallel(benchmark::State& st) {
  const auto s = random_points(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(lgmd(s));
}
BENCHMARK(BM_LgmdSerial)->Arg(1000)->Arg(4000);
BENCHMARK(BM_LgmdParallel)->Arg(1000)->Arg(4000);

void BM_CosineSerial(benchmark::State& st) {
  const auto s = random_points(2000);
  for (auto _ : st) benchmark::DoNotOptimize(cosine_diversity_serial(s));
}
void BM_CosineParallel(benchmark::State& st) {
  const auto s = random_points(2000);
  for (auto _ : st) benchmark::DoNotOptimize(cosine_diversity(s));
}
BENCHMARK(BM_CosineSerial);
BENCHMARK(BM_CosineParallel);

void BM_FlowLossSerial(benchmark::State& st) {
  const auto p = init_params(64, 3);
  const auto batch = draw_flow_batch(default_mixture(), 256, 4);
  GradBuffer g(64);
  for (auto _ : st) {
    g.set_zero();
    benchmark::DoNotOptimize(flow_matching_loss_serial(p, batch, &g));
  }
}
void BM_FlowLossParallel(benchmark::State& st) {
  const auto p = init_params(64, 3);
  const auto batch = draw_flow_batch(default_mixture(), 256, 4);
  GradBuffer g(64);
  for (auto _ : st) {
    g.set_zero();
    benchmark::DoNotOptimize(flow_matching_loss(p, batch, &g));
  }
}
BENCHMARK(BM_FlowLossSerial);
BENCHMARK(BM_FlowLossParallel);

void BM_ForestSerial(benchmark::State& st) {
  const auto p = init_params(64, 5);
  const auto sched = NoiseSchedule::linear(6);
  std::uint64_t it = 0;
  for (auto _ : st) {
    benchmark::DoNotOptimize(rollout_forest_serial(p, sched, BranchSchedule{}, {}, 8, 7, it++));
  }
}
void BM_ForestParallel(benchmark::State& st) {
  const auto p = init_params(64, 5);
  const auto sched = NoiseSchedule::linear(6);
  std::uint64_t it = 0;
  for (auto _ : st) {
    benchmark::DoNotOptimize(rollout_forest(p, sched, BranchSchedule{}, {}, 8, 7, it++));
  }
}
BENCHMARK(BM_ForestSerial);
BENCHMARK(BM_ForestParallel);

}  // namespace

BENCHMARK_MAIN();
