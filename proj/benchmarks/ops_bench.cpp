#include <benchmark/benchmark.h>

#include <random>

#include "resdense/ops.hpp"

using namespace resdense;

namespace {

Tensor<float> random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& e : v) e = dist(rng);
  return Tensor<float>(shape, std::move(v));
}

// args: batch, channels, spatial extent
void BM_Conv2dForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const auto s = static_cast<std::size_t>(state.range(2));
  const auto x = random_tensor({n, c, s, s}, 1);
  const auto k = random_tensor({c, c, 3, 3}, 2);
  for (auto _ : state) {
    auto y = conv2d(x, k, std::nullopt, Conv2dOptions{1, 1, {}});
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * c * c * s * s * 9));
}
BENCHMARK(BM_Conv2dForward)->Args({1, 16, 16})->Args({32, 16, 16})->Args({32, 32, 8});

void BM_Conv2dBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const auto s = static_cast<std::size_t>(state.range(2));
  auto x = random_tensor({n, c, s, s}, 3);
  auto k = random_tensor({c, c, 3, 3}, 4);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    auto loss = sum(conv2d(x, k, std::nullopt, Conv2dOptions{1, 1, {}}, &tape), &tape);
    tape.backward(loss);
    benchmark::DoNotOptimize(k.grad().data());
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({1, 16, 16})->Args({32, 16, 16});

void BM_BatchNormTrain(benchmark::State& state) {
  const auto x = random_tensor({32, 32, 8, 8}, 5);
  const Tensor<float> gamma({32}, 1.0f), beta({32}, 0.0f);
  for (auto _ : state) {
    auto y = batch_norm2d(x, gamma, beta, nullptr, BatchNormOptions{Mode::train});
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_BatchNormTrain);

void BM_GemPool(benchmark::State& state) {
  const auto x = random_tensor({32, 64, 4, 4}, 6);
  std::vector<float> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = e < 0 ? -e : e;
  const Tensor<float> pos(x.shape(), v);
  const double p[] = {3.0};
  for (auto _ : state) {
    auto y = gem_pool(pos, std::span<const double>(p));
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_GemPool);

}  // namespace
