#include <benchmark/benchmark.h>

#include <random>

#include "pop/continual.hpp"
#include "pop/ops.hpp"
#include "pop/random.hpp"
#include "pop/vit.hpp"

namespace pop {
namespace {

template <typename T>
Tensor<T> random(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> dist;
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random<T>({n, n}, 1), b = random<T>({n, n}, 2);
  Tape<T> tape(false);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(tape, a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul<float>)->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<double>)->Arg(64)->Arg(256);

std::vector<data::LabeledImage> images(std::size_t count, const vit::BackboneConfig& cfg) {
  Rng rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<data::LabeledImage> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i].pixels.resize(cfg.channels * cfg.image_size * cfg.image_size);
    for (auto& p : out[i].pixels) p = u(rng);
    out[i].class_id = static_cast<int>(i % 4);
    out[i].task_id = 1;
    out[i].sample_id = static_cast<int>(i);
  }
  return out;
}

// Prompted forward pass of a desk-size batch at task 5.
void BM_Encode(benchmark::State& state) {
  const vit::BackboneConfig cfg;
  auto backbone = vit::Backbone<float>::init(cfg, 1);
  backbone.freeze();
  PromptStore<float> prompts(PromptMode::SPT, cfg.embed_dim, cfg.depth, 1, 2);
  for (int t = 1; t <= 5; ++t) prompts.begin_task(t, 1);
  const auto imgs = images(64, cfg);
  std::vector<const data::LabeledImage*> batch;
  for (const auto& x : imgs) batch.push_back(&x);
  const auto patches = vit::patchify<float>(batch, cfg);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(backbone.encode(tape, patches, prompts).tokens);
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

// Forward, backward and Adam update on one batch of 64 at task 1.
void BM_TrainStep(benchmark::State& state) {
  const vit::BackboneConfig cfg;
  auto backbone = vit::Backbone<float>::init(cfg, 1);
  backbone.freeze();
  ClConfig c;
  c.schedule.epochs = 1;
  c.schedule.batch_size = 64;
  c.schedule.tuning_epochs = 0;
  c.buffer_capacity = 0;
  ContinualLearner<float> learner(backbone, c);
  data::TaskSpec spec{1, {0, 1, 2, 3}, {{3, 32, 32}, images(64, cfg)}, {{3, 32, 32}, images(4, cfg)}};
  learner.run_task(spec);
  auto params = learner.trainable();
  auto adam = AdamState<float>::create(params, {});
  std::vector<const data::LabeledImage*> batch;
  for (const auto& x : spec.train.samples) batch.push_back(&x);
  for (auto _ : state) {
    for (auto& p : params) p.zero_grad();
    Tape<float> tape;
    const auto loss = learner.batch_loss(tape, batch);
    tape.backward(loss);
    adam_step<float>(params, adam);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace pop

BENCHMARK_MAIN();
