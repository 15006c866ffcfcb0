#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssldetr/autodiff.hpp"
#include "ssldetr/patchgrid.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

enum class SSLTaskKind {
  Reconstruction,
  MimContinuous,
  MimDiscrete,
  JigsawContinuous,
  JigsawDiscrete,
};

const char* to_string(SSLTaskKind kind);
SSLTaskKind ssl_task_from_string(const std::string& name);
bool is_continuous(SSLTaskKind kind);

// Maps an image patch to a discrete token id in [0, vocabulary_size).
class VisualTokenizer {
 public:
  virtual ~VisualTokenizer() = default;
  virtual int64_t vocabulary_size() const = 0;
  // patches [P, C, f, f] -> one token id per patch
  virtual std::vector<int64_t> encode(const Tensor& patches) const = 0;
};

// Default tokenizer: uniform quantizer over the per-patch mean color.
// The vocabulary is split into bins^C cells, bins = floor(vocab^(1/C)).
class MeanColorQuantizer final : public VisualTokenizer {
 public:
  explicit MeanColorQuantizer(int64_t vocabulary_size = 512);
  int64_t vocabulary_size() const override { return vocab_; }
  std::vector<int64_t> encode(const Tensor& patches) const override;

 private:
  int64_t vocab_;
};

struct SSLTaskConfig {
  SSLTaskKind kind = SSLTaskKind::MimContinuous;
  double ratio = 0.5;  // ignored for Reconstruction
  std::shared_ptr<const VisualTokenizer> tokenizer;  // MimDiscrete only
};

// A transformed input image together with its supervision targets and the
// patch indices where the loss applies.
struct SSLSample {
  SSLTaskKind kind = SSLTaskKind::Reconstruction;
  PatchGrid grid;
  Tensor input_image;                    // what the network sees (raw [0,1] pixels)
  Tensor target_image;                   // continuous tasks: original image
  std::vector<int64_t> target_labels;    // discrete tasks, aligned with loss_indices
  int64_t label_space = 0;               // discrete tasks: number of classes
  std::vector<int64_t> loss_indices;     // patch indices carrying loss
  std::optional<PatchPermutation> permutation;
};

SSLSample make_reconstruction(const Tensor& image, const PatchGrid& grid);
SSLSample make_mim_continuous(const Tensor& image, const PatchGrid& grid, double ratio, Rng& rng);
SSLSample make_mim_discrete(const Tensor& image, const PatchGrid& grid, double ratio,
                            const VisualTokenizer* tokenizer, Rng& rng);
SSLSample make_jigsaw_continuous(const Tensor& image, const PatchGrid& grid, double ratio,
                                 Rng& rng);
SSLSample make_jigsaw_discrete(const Tensor& image, const PatchGrid& grid, double ratio, Rng& rng);

// Dispatch on config.kind.
SSLSample make_ssl_sample(const Tensor& image, const PatchGrid& grid, const SSLTaskConfig& config,
                          Rng& rng);

// Continuous tasks: mean |prediction - target| over the pixels of the
// loss-bearing patches only; prediction is [C, H, W].
// Discrete tasks: mean cross entropy over the loss-bearing rows of the
// per-token logits [num_patches, label_space].
// Empty loss_indices yields 0.
double ssl_loss(const Tensor& prediction, const SSLSample& sample, const PatchGrid& grid);

// Differentiable form of the same loss for a prediction living on a tape.
ad::Var ssl_loss_var(ad::Tape& tape, ad::Var prediction, const SSLSample& sample,
                     const PatchGrid& grid);

// Pixel weight mask for continuous losses: 1 inside loss-bearing patches.
Tensor ssl_loss_mask(const SSLSample& sample, int64_t channels);

}  // namespace ssldetr
