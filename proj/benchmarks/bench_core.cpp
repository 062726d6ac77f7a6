#include <benchmark/benchmark.h>

#include "icd/losses.hpp"
#include "icd/rng.hpp"

namespace {

icd::Tensor random_tensor(icd::Shape shape, icd::Rng& rng) {
  std::vector<double> data(icd::shape_numel(shape));
  for (double& v : data) v = rng.uniform(-2.0, 2.0);
  return icd::Tensor::from_data(std::move(shape), std::move(data));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  icd::Rng rng(1);
  const icd::Tensor a = random_tensor({n, n}, rng);
  const icd::Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    auto c = icd::matmul(a, b);
    benchmark::DoNotOptimize(c);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  icd::Rng rng(2);
  const icd::Tensor x = random_tensor({8, c, 16, 16}, rng);
  const icd::Tensor w = random_tensor({c, c, 3, 3}, rng);
  const icd::Tensor bias = random_tensor({c}, rng);
  for (auto _ : state) {
    auto y = icd::conv2d(x, w, bias, 1, 1);
    benchmark::DoNotOptimize(y);
  }
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64);

void BM_IcdLoss(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  icd::Rng rng(3);
  const icd::LogitMap t_map{random_tensor({batch, 8, 4, 4}, rng)};
  const icd::LogitMap s_map{random_tensor({batch, 8, 4, 4}, rng)};
  const icd::ScaleSpec spec({1, 2, 4}, 4);
  icd::DistillConfig cfg;
  const auto t_cells = icd::pool_cells(t_map, spec);
  const auto s_cells = icd::pool_cells(s_map, spec);
  for (auto _ : state) {
    auto loss = icd::icd_loss(t_cells, s_cells, cfg);
    benchmark::DoNotOptimize(loss);
  }
}
BENCHMARK(BM_IcdLoss)->Arg(16)->Arg(64);

void BM_SddLoss(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  icd::Rng rng(4);
  const icd::LogitMap t_map{random_tensor({batch, 8, 4, 4}, rng)};
  const icd::LogitMap s_map{random_tensor({batch, 8, 4, 4}, rng)};
  const icd::ScaleSpec spec({1, 2, 4}, 4);
  icd::DistillConfig cfg;
  const auto t_cells = icd::pool_cells(t_map, spec);
  const auto s_cells = icd::pool_cells(s_map, spec);
  for (auto _ : state) {
    auto loss = icd::sdd_loss(t_cells, s_cells, cfg);
    benchmark::DoNotOptimize(loss);
  }
}
BENCHMARK(BM_SddLoss)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
