#include <random>

#include <benchmark/benchmark.h>

#include "stda/harness.hpp"

using namespace stda;
using nn::NormMode;

namespace {

Tensor<float> uniform_tensor(Shape shape, uint64_t seed) {
  Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : t.span()) v = u(rng);
  return t;
}

void BM_SpatialAttention(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  nn::Rng rng(1);
  SpatialAttention<float> att(32, rng);
  att.epsilon.mutable_value()[0] = 0.5f;
  Var<float> x(uniform_tensor({4, 32, side, side}, 2));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(att.forward(x).value().data());
}
BENCHMARK(BM_SpatialAttention)->Arg(4)->Arg(7)->Arg(14);

void BM_ConvGruStep(benchmark::State& state) {
  nn::Rng rng(3);
  ConvGru<float> gru(32, 32, 3, rng);
  Var<float> a(uniform_tensor({4, 32, 7, 7}, 4)), h(uniform_tensor({4, 32, 7, 7}, 5));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(gru.step(a, h, NormMode::kEval).hidden.value().data());
}
BENCHMARK(BM_ConvGruStep);

void BM_TinyModelForward(benchmark::State& state) {
  StdaConfig cfg;
  cfg.image_size = static_cast<int>(state.range(0));
  nn::Rng rng(6);
  StdaModel<float> model(cfg, rng);
  Var<float> frames(uniform_tensor({8, cfg.t_len, 3, cfg.image_size, cfg.image_size}, 7));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(frames, NormMode::kEval).logits.value().data());
  state.SetItemsProcessed(state.iterations() * 8 * cfg.t_len);
}
BENCHMARK(BM_TinyModelForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TinyTrainStep(benchmark::State& state) {
  StdaConfig cfg;
  nn::Rng rng(8);
  StdaModel<float> model(cfg, rng);
  auto params = model.parameters();
  Var<float> frames(uniform_tensor({8, cfg.t_len, 3, cfg.image_size, cfg.image_size}, 9));
  const std::vector<int> labels{0, 0, 0, 0, 0, 1, 2, 0};
  const auto costs = default_cost_matrix({6, 1, 1});
  for (auto _ : state) {
    params.zero_grad();
    auto loss = cost_sensitive_loss(ops::softmax_lastdim(model.forward(frames, NormMode::kTrain).logits), labels, costs);
    loss.backward();
    benchmark::DoNotOptimize(loss.value().data());
  }
}
BENCHMARK(BM_TinyTrainStep)->Unit(benchmark::kMillisecond);

void BM_MetricReport(benchmark::State& state) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> t(10000), p(10000);
  for (size_t i = 0; i < t.size(); ++i) {
    t[i] = lab(rng);
    p[i] = lab(rng);
  }
  for (auto _ : state) benchmark::DoNotOptimize(metric_report(confusion(t, p, 3)).average.g_mean);
}
BENCHMARK(BM_MetricReport);

}  // namespace

BENCHMARK_MAIN();
