#include <vector>

#include <benchmark/benchmark.h>

#include <riskkit/bias.hpp>
#include <riskkit/data.hpp>
#include <riskkit/epistemic.hpp>
#include <riskkit/eval.hpp>
#include <riskkit/losses.hpp>
#include <riskkit/random.hpp>
#include <riskkit/wrapper.hpp>

namespace {

using namespace riskkit;

Tensor gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (auto& e : v) e = rng.normal();
  return Tensor::matrix(rows, cols, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = gaussian(n, n, 1);
  const Tensor b = gaussian(n, n, 2);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_ForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto model = SequentialModel::mlp(13, {64, 64}, 1, 0);
  const Tensor x = gaussian(batch, 13, 3);
  const Tensor y = gaussian(batch, 1, 4);
  for (auto _ : state) {
    mse(model.forward(x), y).backward();
    for (auto p : model.parameters()) p.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  const std::vector<std::string> specs{"mve", "dropout+mve", "vae+mve"};
  const auto& spec = specs.at(static_cast<std::size_t>(state.range(0)));
  auto g = wrap(SequentialModel::mlp(13, {50}, 1, 0), parse_metric_list(spec));
  const Tensor x = gaussian(32, 13, 5);
  const Tensor y = gaussian(32, 1, 6);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(g.train_step(x, y, seed++));
  state.SetLabel(spec);
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 2);

void BM_DropoutScore(benchmark::State& state) {
  const auto model = insert_dropout(SequentialModel::mlp(4, {64, 64}, 1, 0), 0.1);
  const Tensor x = gaussian(256, 4, 7);
  for (auto _ : state) benchmark::DoNotOptimize(dropout_score(model, x, static_cast<std::size_t>(state.range(0)), 1));
}
BENCHMARK(BM_DropoutScore)->Arg(5)->Arg(20);

void BM_DensityScore(benchmark::State& state) {
  const auto kind = state.range(0) == 0 ? DensityKind::histogram : DensityKind::kde;
  const Tensor ref = gaussian(2000, 8, 8);
  const Tensor q = gaussian(500, 8, 9);
  const auto est = fit_density(ref, kind);
  for (auto _ : state) benchmark::DoNotOptimize(est.score(q));
  state.SetLabel(std::string(to_string(kind)));
  state.SetItemsProcessed(state.iterations() * 500);
}
BENCHMARK(BM_DensityScore)->Arg(0)->Arg(1);

void BM_AucRoc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(10);
  std::vector<double> neg(n), pos(n);
  for (auto& e : neg) e = rng.normal();
  for (auto& e : pos) e = rng.normal(0.5, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(auc_roc(neg, pos));
}
BENCHMARK(BM_AucRoc)->Arg(1000)->Arg(100000);

}  // namespace
BENCHMARK_MAIN();
