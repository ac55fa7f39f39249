#include <benchmark/benchmark.h>

#include <random>

#include "msht/explain.hpp"
#include "msht/fgd.hpp"
#include "msht/model.hpp"
#include "msht/ops.hpp"

using namespace msht;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto c = state.range(0);
  const auto e = state.range(1);
  const Var x(random_tensor({2, c, e, e}, 1));
  const Var w(random_tensor({c, c, 3, 3}, 2));
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, Var(), {1, 1}).value().data());
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 9 * e * e);
}
BENCHMARK(BM_Conv3x3)->Args({16, 32})->Args({64, 16})->Args({128, 8})->Unit(benchmark::kMillisecond);

void BM_SelfAttention(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  const auto tokens = state.range(1);
  ParameterSet ps;
  Initializer init(3);
  const MultiHeadAttention attn(ps, init, "attn", dim, dim / 64 > 0 ? dim / 64 : 4, false);
  const Var z(random_tensor({2, tokens, dim}, 4));
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(mhsa(attn, z).value().data());
}
BENCHMARK(BM_SelfAttention)->Args({64, 5})->Args({768, 145})->Unit(benchmark::kMillisecond);

void BM_SimAM(benchmark::State& state) {
  const Var x(random_tensor({2, 256, 24, 24}, 5));
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::simam(x, 1e-4).value().data());
}
BENCHMARK(BM_SimAM)->Unit(benchmark::kMillisecond);

void BM_TinyForward(benchmark::State& state) {
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 6);
  const Tensor x = random_tensor({state.range(0), 3, 64, 64}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(x).data());
}
BENCHMARK(BM_TinyForward)->Arg(2)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_TinyForwardBackward(benchmark::State& state) {
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 8);
  const Var x(random_tensor({16, 3, 64, 64}, 9));
  std::vector<int> labels(16);
  for (int i = 0; i < 16; ++i) labels[i] = i % 2;
  for (auto _ : state) {
    Var loss = ops::cross_entropy(m.logits(x, ForwardContext{true, nullptr}), labels);
    loss.backward();
    for (const auto& p : m.parameters()) {
      Var v = p.var;
      v.zero_grad();
    }
  }
}
BENCHMARK(BM_TinyForwardBackward)->Unit(benchmark::kMillisecond);

void BM_TinyGradCam(benchmark::State& state) {
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 10);
  const Tensor x = random_tensor({3, 64, 64}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(grad_cam(m, x).values.data());
}
BENCHMARK(BM_TinyGradCam)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
