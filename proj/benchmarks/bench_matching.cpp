#include <benchmark/benchmark.h>

#include "ssldetr/matching.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

using namespace ssldetr;

namespace {

Tensor random_cost(int64_t queries, int64_t objects, uint64_t seed) {
  Rng rng(seed);
  Tensor cost({queries, objects});
  for (int64_t i = 0; i < cost.numel(); ++i) cost[i] = rng.uniform(-4.0, 4.0);
  return cost;
}

void BM_HungarianMatch(benchmark::State& state) {
  const Tensor cost = random_cost(state.range(0), state.range(1), 42);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hungarian_match(cost));
  }
}

void BM_PairwiseCost(benchmark::State& state) {
  const int64_t queries = state.range(0);
  const int64_t objects = state.range(1);
  Rng rng(43);
  DetectionSet det;
  det.class_logits = Tensor({queries, 4});
  det.boxes = Tensor({queries, 4});
  for (int64_t i = 0; i < det.class_logits.numel(); ++i) {
    det.class_logits[i] = rng.uniform(-2.0, 2.0);
  }
  for (int64_t q = 0; q < queries; ++q) {
    det.boxes.at(q, 0) = rng.uniform(0.2, 0.8);
    det.boxes.at(q, 1) = rng.uniform(0.2, 0.8);
    det.boxes.at(q, 2) = rng.uniform(0.05, 0.3);
    det.boxes.at(q, 3) = rng.uniform(0.05, 0.3);
  }
  GroundTruthSet gt;
  for (int64_t j = 0; j < objects; ++j) {
    gt.labels.push_back(j % 3);
    gt.boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                        rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)});
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(pairwise_cost(det, gt));
  }
}

}  // namespace

BENCHMARK(BM_HungarianMatch)->Args({10, 3})->Args({25, 8})->Args({100, 20});
BENCHMARK(BM_PairwiseCost)->Args({10, 3})->Args({100, 20});

BENCHMARK_MAIN();
