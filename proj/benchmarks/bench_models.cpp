#include <benchmark/benchmark.h>

#include "vqtok/ar_probe.hpp"
#include "vqtok/tokenizer.hpp"

using namespace vqtok;

namespace {

net::TokenizerConfig desk_config(net::TierName tier) {
  net::TokenizerConfig c;
  c.image_size = 32;
  c.downsample = 8;
  c.token_count = 16;
  c.encoder_tier = tier;
  c.decoder_tier = tier;
  return c;
}

// Arg: tier index (0 = S, 1 = B, 2 = L). Batch 16 of 32x32 images.
void BM_TokenizerForward(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  net::Tokenizer tok(desk_config(net::all_tiers()[static_cast<size_t>(state.range(0))]));
  tok->eval();
  auto images = torch::rand({16, 3, 32, 32}) * 2 - 1;
  vq::QuantizeOptions q;
  q.track_usage = false;
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(tok->forward(images, q).reconstruction);
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TokenizerForward)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_TokenizerTrainStep(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  net::Tokenizer tok(desk_config(net::all_tiers()[static_cast<size_t>(state.range(0))]));
  torch::optim::AdamW opt(tok->parameters(), torch::optim::AdamWOptions(1e-4));
  auto images = torch::rand({16, 3, 32, 32}) * 2 - 1;
  vq::QuantizeOptions q;
  q.track_usage = false;
  for (auto _ : state) {
    opt.zero_grad();
    auto out = tok->forward(images, q);
    auto loss = (out.reconstruction - images).pow(2).mean() + vq::entropy_loss(out.latents.posterior);
    loss.backward();
    opt.step();
  }
}
BENCHMARK(BM_TokenizerTrainStep)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_ARForward(benchmark::State& state) {
  at::set_num_threads(1);
  torch::manual_seed(0);
  probe::ARConfig c;
  c.token_count = state.range(0);
  probe::ARModel model(c);
  model->eval();
  auto tokens = torch::randint(c.vocab, {16, c.token_count}, torch::kInt64);
  auto classes = torch::randint(c.num_classes, {16}, torch::kInt64);
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(tokens, classes));
  state.SetItemsProcessed(state.iterations() * 16 * c.token_count);
}
BENCHMARK(BM_ARForward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
