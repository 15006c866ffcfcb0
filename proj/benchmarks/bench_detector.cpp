#include <benchmark/benchmark.h>

#include <optional>

#include "ssldetr/autodiff.hpp"
#include "ssldetr/data.hpp"
#include "ssldetr/detector.hpp"
#include "ssldetr/matching.hpp"
#include "ssldetr/rng.hpp"

using namespace ssldetr;

namespace {

DetrModel bench_model(std::optional<SSLHeadConfig> head) {
  DetectorConfig c;
  c.num_queries = 10;
  c.num_classes = 3;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.attention_heads = 4;
  c.hidden_dim = 64;
  c.ffn_dim = 128;
  c.image_size = 64;
  BackboneConfig b;
  b.downsampling_factor = 16;
  b.feature_dim = 32;
  Rng rng(1);
  return DetrModel(c, b, head, rng);
}

Tensor bench_image(uint64_t seed) {
  Rng rng(seed);
  Tensor img({3, 64, 64});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(-1.0, 1.0);
  return img;
}

void BM_Predict(benchmark::State& state) {
  const DetrModel model = bench_model(std::nullopt);
  const Tensor image = bench_image(2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.predict(image));
  }
}

void BM_DetectionForwardBackward(benchmark::State& state) {
  DetrModel model = bench_model(std::nullopt);
  const Tensor image = bench_image(3);
  GroundTruthSet gt;
  gt.labels = {0, 2};
  gt.boxes = {{0.3, 0.3, 0.25, 0.25}, {0.7, 0.6, 0.3, 0.4}};
  for (auto _ : state) {
    ad::Tape tape;
    const auto f = model.forward(tape, image);
    const DetectionSet det{tape.value(f.class_logits), tape.value(f.boxes)};
    const MatchResult match = hungarian_match(pairwise_cost(det, gt));
    const ad::Var loss = detection_loss_var(tape, f.class_logits, f.boxes, gt, match);
    tape.backward(loss);
    for (Parameter* p : model.parameters()) p->zero_grad();
  }
}

void BM_EncoderSslForward(benchmark::State& state) {
  SSLHeadConfig head;
  head.task = SSLTaskKind::MimContinuous;
  DetrModel model = bench_model(head);
  const Tensor image = bench_image(4);
  const PatchGrid grid = model.grid_for(image);
  for (auto _ : state) {
    ad::Tape tape;
    const auto feats = model.backbone_forward(tape, image);
    const auto tokens = model.encoder_forward(tape, feats, grid);
    benchmark::DoNotOptimize(
        tape.value(model.ssl_head_forward(tape, tokens, grid, SSLTaskKind::MimContinuous)));
  }
}

}  // namespace

BENCHMARK(BM_Predict);
BENCHMARK(BM_DetectionForwardBackward);
BENCHMARK(BM_EncoderSslForward);

BENCHMARK_MAIN();
