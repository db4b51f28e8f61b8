#include <benchmark/benchmark.h>

#include <random>

#include "metx/harness.hpp"
#include "metx/objectives.hpp"

using namespace metx;

namespace {

void BM_Matmul(benchmark::State& state) {
  const std::int64_t rows = state.range(0);
  std::mt19937 rng(1);
  Tensor a = Tensor::rand_uniform({rows, 64}, rng, -1, 1);
  Tensor b = Tensor::rand_uniform({64, 32}, rng, -1, 1);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * rows * 64 * 32 * 2);
}
BENCHMARK(BM_Matmul)->Arg(512)->Arg(8192);

void BM_EbaForward(benchmark::State& state) {
  std::mt19937 rng(2);
  EBAParams p;
  p.w_key = Tensor::rand_uniform({64, 64}, rng, -0.1f, 0.1f);
  p.w_value = Tensor::rand_uniform({64, 64}, rng, -0.1f, 0.1f);
  p.w_query_key = Tensor::rand_uniform({64, 64}, rng, -0.1f, 0.1f);
  p.w_query_value = Tensor::rand_uniform({64, 64}, rng, -0.1f, 0.1f);
  p.w_mid = Tensor::rand_uniform({64, 32}, rng, -0.1f, 0.1f);
  p.w_score = Tensor::rand_uniform({32, 1}, rng, -0.1f, 0.1f);
  p.w_channel = Tensor::rand_uniform({32, 64}, rng, -0.1f, 0.1f);
  Tensor q = Tensor::rand_uniform({7, 34, 64}, rng, -1, 1);
  Tensor kv = Tensor::rand_uniform({7, 34, 64}, rng, -1, 1);
  const AttnMask mask = AttnMask::causal(34);
  for (auto _ : state) {
    Tensor out = eba(q, kv, kv, p, &mask);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_EbaForward);

void BM_TrainStep(benchmark::State& state) {
  RunConfig config;
  config.dataset_size = 8;
  Corpus corpus = generate_corpus(3, 8);
  ModelParams params = ModelParams::init(config, corpus.vocab.size());
  AdamState adam;
  adam.learning_rate = config.learning_rate;
  const Sample& sample = corpus.samples[0];
  std::span<const std::int32_t> input(sample.report_ids.data(),
                                      sample.report_ids.size() - 1);
  std::span<const std::int32_t> targets(sample.report_ids.data() + 1,
                                        sample.report_ids.size() - 1);
  for (auto _ : state) {
    zero_grads(params.named);
    Tape tape;
    EncodedFeatures feats = encode_image(sample.image, params, config);
    Tensor logits = decoder_forward(feats.f_e, feats.f_v, input, params.dec, config);
    Tensor loss = total_loss(ce_loss(logits, targets, true),
                             orthogonal_loss(feats.f_e), config.lambda);
    backward(loss);
    optimizer_step(params.named, adam);
    benchmark::DoNotOptimize(params.named.front().second.values().data());
  }
}
BENCHMARK(BM_TrainStep);

void BM_GreedyGeneration(benchmark::State& state) {
  RunConfig config;
  Corpus corpus = generate_corpus(4, 4);
  ModelParams params = ModelParams::init(config, corpus.vocab.size());
  const Sample& sample = corpus.samples[0];
  NoGradScope no_grad;
  EncodedFeatures feats = encode_image(sample.image, params, config);
  for (auto _ : state) {
    auto reports =
        generate_greedy(feats.f_e, feats.f_v, params.dec, config, corpus.vocab);
    benchmark::DoNotOptimize(reports.size());
  }
}
BENCHMARK(BM_GreedyGeneration);

}  // namespace

BENCHMARK_MAIN();
