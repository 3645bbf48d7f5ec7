#include <benchmark/benchmark.h>

#include "blockkd/ops.hpp"
#include "blockkd/stones.hpp"

using namespace bkd;

namespace {

Tensor uniform(Rng& rng, Shape shape) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(0);
  auto a = uniform(rng, {n, n}), b = uniform(rng, {n, n});
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Conv3x3Forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(0);
  auto x = uniform(rng, {64, c, 8, 8}), w = uniform(rng, {c, c, 3, 3});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, 1, 1));
}
BENCHMARK(BM_Conv3x3Forward)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv3x3Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(0);
  auto x = uniform(rng, {64, c, 8, 8}).set_requires_grad(true);
  auto w = uniform(rng, {c, c, 3, 3}).set_requires_grad(true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    sum(conv2d(x, w, 1, 1)).backward();
  }
}
BENCHMARK(BM_Conv3x3Backward)->Arg(8)->Arg(16)->Arg(32);

// One optimization step's forward and backward on the tiny preset with
// different stone subsets: 0 = none, 1 = {2,3}, 2 = {1,2,3}.
void BM_TrainStep(benchmark::State& state) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto pair = build_factory_pair(arch, rng);
  auto plan = DistillPlan::full(3);
  plan.warmup_epochs = 0;
  if (state.range(0) == 0) plan = prune_stones(plan, {});
  if (state.range(0) == 1) plan = prune_stones(plan, {2, 3});
  auto x = uniform(rng, {64, 1, 8, 8});
  Targets y(64);
  for (auto& v : y) v = static_cast<int>(rng.below(4));
  for (auto _ : state) {
    auto loss = total_loss(x, y, &pair.teacher, pair.student, pair.connectors, plan, 0);
    loss.value.backward();
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
