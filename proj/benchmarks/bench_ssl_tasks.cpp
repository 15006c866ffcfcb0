#include <benchmark/benchmark.h>

#include <memory>

#include "ssldetr/patchgrid.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/ssl_tasks.hpp"

using namespace ssldetr;

namespace {

Tensor random_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  Tensor img({3, size, size});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

void BM_MakeSample(benchmark::State& state) {
  const auto kind = static_cast<SSLTaskKind>(state.range(0));
  const int64_t size = state.range(1);
  const Tensor image = random_image(size, 7);
  const PatchGrid grid = compute_grid(size, size, 16);
  SSLTaskConfig cfg;
  cfg.kind = kind;
  cfg.ratio = 0.5;
  if (kind == SSLTaskKind::MimDiscrete) {
    cfg.tokenizer = std::make_shared<MeanColorQuantizer>(512);
  }
  Rng rng(8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(make_ssl_sample(image, grid, cfg, rng));
  }
}

void BM_ContinuousLoss(benchmark::State& state) {
  const int64_t size = state.range(0);
  const Tensor image = random_image(size, 9);
  const PatchGrid grid = compute_grid(size, size, 16);
  SSLTaskConfig cfg;
  cfg.kind = SSLTaskKind::MimContinuous;
  cfg.ratio = 0.5;
  Rng rng(10);
  const SSLSample sample = make_ssl_sample(image, grid, cfg, rng);
  const Tensor pred = random_image(size, 11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ssl_loss(pred, sample, grid));
  }
}

}  // namespace

BENCHMARK(BM_MakeSample)
    ->Args({static_cast<int64_t>(SSLTaskKind::Reconstruction), 128})
    ->Args({static_cast<int64_t>(SSLTaskKind::MimContinuous), 128})
    ->Args({static_cast<int64_t>(SSLTaskKind::MimDiscrete), 128})
    ->Args({static_cast<int64_t>(SSLTaskKind::JigsawContinuous), 128})
    ->Args({static_cast<int64_t>(SSLTaskKind::JigsawDiscrete), 128});
BENCHMARK(BM_ContinuousLoss)->Arg(128)->Arg(256);

BENCHMARK_MAIN();
