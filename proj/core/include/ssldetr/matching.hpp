#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssldetr/autodiff.hpp"
#include "ssldetr/detection_set.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Generalized IoU on (cx, cy, w, h) boxes. Degenerate (zero-area) overlap
// regions contribute IoU 0; the enclosing-box penalty still applies.
double box_iou(const Box& a, const Box& b);
double box_giou(const Box& a, const Box& b);

struct CostWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
};

// cost[i][j] for query i against ground-truth object j:
//   cls * (-p_i(c_j)) + l1 * |b_i - b_j|_1 + giou * (-GIoU(b_i, b_j))
// where p_i is the softmax over class logits (incl. no-object).
// Throws NumericError if any entry is non-finite.
Tensor pairwise_cost(const DetectionSet& det, const GroundTruthSet& gt,
                     const CostWeights& w = {});

struct MatchResult {
  // Sorted by gt index; pairs[k] = {query, gt}.
  std::vector<std::pair<int64_t, int64_t>> pairs;
  double total_cost = 0.0;
};

// Minimum-cost assignment of every column (ground-truth object) of `cost`
// [num_queries, num_gt] to a distinct row (query). Requires
// num_queries >= num_gt (InfeasibleError otherwise). Among all minimum-cost
// assignments, returns the one whose pair list — sorted by gt index — is
// lexicographically smallest in query indices.
MatchResult hungarian_match(const Tensor& cost);

struct DetectionLossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;  // down-weight for the background class in the CE
};

struct DetectionLossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
};

// Set-prediction loss for a fixed matching. Classification is a weighted
// cross-entropy over all queries (unmatched queries target no-object, weight
// `no_object`); box terms average over matched pairs (L1 and 1 - GIoU, each
// divided by the number of ground-truth objects). With no ground truth the box
// terms are zero and every query targets no-object.
DetectionLossBreakdown detection_loss(const DetectionSet& det,
                                      const GroundTruthSet& gt,
                                      const MatchResult& match,
                                      const DetectionLossWeights& w = {});

// Differentiable variant on a tape. `class_logits` is [num_queries,
// num_classes + 1] and `boxes` [num_queries, 4]; both must live on `tape`.
// Returns the scalar total loss; per-term values are written to `breakdown`
// if non-null.
ad::Var detection_loss_var(ad::Tape& tape, ad::Var class_logits, ad::Var boxes,
                           const GroundTruthSet& gt, const MatchResult& match,
                           const DetectionLossWeights& w = {},
                           DetectionLossBreakdown* breakdown = nullptr);

}  // namespace ssldetr
