#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Box parametrization used throughout: (cx, cy, w, h), normalized to [0, 1].
using Box = std::array<double, 4>;

// Fixed-size set of predictions from the learnable queries. Class logits
// include a trailing no-object class.
struct DetectionSet {
  Tensor class_logits;  // [num_queries, num_classes + 1]
  Tensor boxes;         // [num_queries, 4], squashed into the unit square

  int64_t num_queries() const { return class_logits.dim(0); }
  int64_t num_classes() const { return class_logits.dim(1) - 1; }
  Box box(int64_t q) const {
    return {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
  }
};

struct GroundTruthSet {
  std::vector<int64_t> labels;
  std::vector<Box> boxes;  // (cx, cy, w, h) in [0, 1]

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  bool empty() const { return labels.empty(); }
};

}  // namespace ssldetr
