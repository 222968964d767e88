#include <benchmark/benchmark.h>

#include "vqtok/vq.hpp"

using namespace vqtok;

namespace {

// Args: codebook size, tokens per image. Batch 16, code dim 8.
void BM_Quantize(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  const int64_t n = state.range(0), t = state.range(1);
  vq::Codebook cb(n, 8);
  auto z = torch::randn({16, t, 8}) / static_cast<double>(n);
  vq::QuantizeOptions q;
  q.with_posterior = false;
  q.track_usage = false;
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(vq::quantize(z, cb, q).indices);
  state.SetItemsProcessed(state.iterations() * 16 * t);
}
BENCHMARK(BM_Quantize)->Args({1024, 16})->Args({1024, 64})->Args({16384, 64});

void BM_PosteriorEntropy(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  const int64_t n = state.range(0);
  auto codes = torch::randn({n, 8});
  auto z = torch::randn({16, 64, 8});
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(vq::entropy_loss(vq::code_posterior(z, codes, 1e-2)));
  state.SetItemsProcessed(state.iterations() * 16 * 64);
}
BENCHMARK(BM_PosteriorEntropy)->Arg(1024)->Arg(16384);

void BM_PosteriorEntropyBackward(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  auto codes = torch::randn({1024, 8}).requires_grad_(true);
  auto z = torch::randn({16, 64, 8}).requires_grad_(true);
  for (auto _ : state) {
    vq::entropy_loss(vq::code_posterior(z, codes, 1e-2)).backward();
    z.mutable_grad().zero_();
    codes.mutable_grad().zero_();
  }
}
BENCHMARK(BM_PosteriorEntropyBackward);

}  // namespace
