#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssldetr/autodiff.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

struct OptimConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int64_t batch_size = 8;
  double grad_clip_norm = 0.1;  // applied to the global gradient norm
  int64_t epochs = 10;
};

// Adaptive-moment optimizer with decoupled weight decay. Only the parameters
// passed to step() are updated; moment buffers are allocated per parameter on
// first sight. Gradients are consumed (zeroed) by the step.
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  // Scales all gradients so their joint L2 norm is at most clip_norm
  // (clip_norm <= 0 disables clipping), then applies one update. Returns the
  // pre-clip global gradient norm.
  double step(const std::vector<Parameter*>& params, double clip_norm);

  int64_t steps_taken() const { return t_; }

  // Moment buffers keyed by parameter name, for checkpointing.
  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& state, int64_t steps_taken);

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  double lr_;
  double wd_;
  double beta1_;
  double beta2_;
  double eps_;
  int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace ssldetr
