#include "ssldetr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ssldetr/errors.hpp"

namespace ssldetr {

namespace {

struct Corners {
  double x1, y1, x2, y2;
};

Corners to_corners(const Box& b) {
  return {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0,
          b[1] + b[3] / 2.0};
}

}  // namespace

double box_iou(const Box& a, const Box& b) {
  const Corners ca = to_corners(a);
  const Corners cb = to_corners(b);
  const double iw =
      std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
  const double ih =
      std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
  const double inter = iw * ih;
  const double area_a = (ca.x2 - ca.x1) * (ca.y2 - ca.y1);
  const double area_b = (cb.x2 - cb.x1) * (cb.y2 - cb.y1);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double box_giou(const Box& a, const Box& b) {
  const Corners ca = to_corners(a);
  const Corners cb = to_corners(b);
  const double iw =
      std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
  const double ih =
      std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
  const double inter = iw * ih;
  const double area_a = (ca.x2 - ca.x1) * (ca.y2 - ca.y1);
  const double area_b = (cb.x2 - cb.x1) * (cb.y2 - cb.y1);
  const double uni = area_a + area_b - inter;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  const double ew = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  const double eh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  const double enclosing = ew * eh;
  if (enclosing <= 0.0) return iou;
  return iou - (enclosing - uni) / enclosing;
}

Tensor pairwise_cost(const DetectionSet& det, const GroundTruthSet& gt,
                     const CostWeights& w) {
  const int64_t nq = det.num_queries();
  const int64_t nc = det.num_classes();
  const int64_t ng = gt.size();
  if (det.boxes.dim(0) != nq || det.boxes.dim(1) != 4) {
    throw ShapeError("pairwise_cost: boxes shape " + det.boxes.shape_str() +
                     " does not match " + std::to_string(nq) + " queries");
  }
  for (int64_t j = 0; j < ng; ++j) {
    if (gt.labels[static_cast<size_t>(j)] < 0 ||
        gt.labels[static_cast<size_t>(j)] >= nc) {
      throw RangeError("pairwise_cost: ground-truth label " +
                       std::to_string(gt.labels[static_cast<size_t>(j)]) +
                       " outside [0, " + std::to_string(nc) + ")");
    }
  }

  Tensor cost = Tensor::zeros({nq, ng});
  if (ng == 0) return cost;

  // Softmax over each query's logits, computed stably.
  Tensor probs = Tensor::zeros({nq, nc + 1});
  for (int64_t i = 0; i < nq; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k <= nc; ++k) mx = std::max(mx, det.class_logits.at(i, k));
    double denom = 0.0;
    for (int64_t k = 0; k <= nc; ++k) denom += std::exp(det.class_logits.at(i, k) - mx);
    for (int64_t k = 0; k <= nc; ++k)
      probs.at(i, k) = std::exp(det.class_logits.at(i, k) - mx) / denom;
  }

  for (int64_t i = 0; i < nq; ++i) {
    const Box bi = det.box(i);
    for (int64_t j = 0; j < ng; ++j) {
      const Box& bj = gt.boxes[static_cast<size_t>(j)];
      double l1 = 0.0;
      for (int d = 0; d < 4; ++d) l1 += std::abs(bi[d] - bj[d]);
      const double c = w.cls * (-probs.at(i, gt.labels[static_cast<size_t>(j)])) +
                       w.l1 * l1 + w.giou * (-box_giou(bi, bj));
      if (!std::isfinite(c)) {
        throw NumericError("pairwise_cost: non-finite cost at query " +
                           std::to_string(i) + ", object " + std::to_string(j));
      }
      cost.at(i, j) = c;
    }
  }
  return cost;
}

namespace {

// Potentials-based assignment over a sub-matrix of `cost`: every column in
// `col_ids` is matched to a distinct row in `row_ids` at minimum total cost.
// Requires |row_ids| >= |col_ids| >= 1.
double solve_assignment(const Tensor& cost, const std::vector<int64_t>& row_ids,
                        const std::vector<int64_t>& col_ids,
                        std::vector<int64_t>* col_to_row) {
  const int n = static_cast<int>(col_ids.size());  // workers (gt objects)
  const int m = static_cast<int>(row_ids.size());  // jobs (queries)
  const double inf = std::numeric_limits<double>::infinity();
  auto a = [&](int i, int j) {
    return cost.at(row_ids[static_cast<size_t>(j - 1)],
                   col_ids[static_cast<size_t>(i - 1)]);
  };

  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0);
  std::vector<int> way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = a(i0, j) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  double total = 0.0;
  if (col_to_row) col_to_row->assign(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    const int i = p[static_cast<size_t>(j)];
    if (i == 0) continue;
    total += a(i, j);
    if (col_to_row)
      (*col_to_row)[static_cast<size_t>(i - 1)] = row_ids[static_cast<size_t>(j - 1)];
  }
  return total;
}

}  // namespace

MatchResult hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) {
    throw ShapeError("hungarian_match: expected a 2-D cost matrix, got " +
                     cost.shape_str());
  }
  const int64_t nq = cost.dim(0);
  const int64_t ng = cost.dim(1);
  if (nq < ng) {
    throw InfeasibleError("hungarian_match: " + std::to_string(ng) +
                          " objects cannot be uniquely matched to " +
                          std::to_string(nq) + " predictions");
  }
  if (!cost.all_finite()) {
    throw NumericError("hungarian_match: cost matrix has non-finite entries");
  }

  MatchResult result;
  if (ng == 0) return result;

  std::vector<int64_t> all_rows(static_cast<size_t>(nq));
  std::iota(all_rows.begin(), all_rows.end(), 0);
  std::vector<int64_t> all_cols(static_cast<size_t>(ng));
  std::iota(all_cols.begin(), all_cols.end(), 0);
  const double best = solve_assignment(cost, all_rows, all_cols, nullptr);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  // Greedy refinement: fix, for each object in index order, the smallest
  // query that still admits an optimal completion. This realizes the
  // lexicographically smallest pair list among minimum-cost assignments.
  std::vector<char> row_used(static_cast<size_t>(nq), 0);
  double fixed_cost = 0.0;
  for (int64_t g = 0; g < ng; ++g) {
    std::vector<int64_t> rem_cols;
    for (int64_t c = g + 1; c < ng; ++c) rem_cols.push_back(c);
    bool placed = false;
    for (int64_t q = 0; q < nq && !placed; ++q) {
      if (row_used[static_cast<size_t>(q)]) continue;
      double completion = 0.0;
      if (!rem_cols.empty()) {
        std::vector<int64_t> rem_rows;
        for (int64_t r = 0; r < nq; ++r) {
          if (!row_used[static_cast<size_t>(r)] && r != q) rem_rows.push_back(r);
        }
        completion = solve_assignment(cost, rem_rows, rem_cols, nullptr);
      }
      if (fixed_cost + cost.at(q, g) + completion <= best + tol) {
        result.pairs.emplace_back(q, g);
        row_used[static_cast<size_t>(q)] = 1;
        fixed_cost += cost.at(q, g);
        placed = true;
      }
    }
    if (!placed) {
      throw ContractError("hungarian_match: refinement failed to complete an "
                          "optimal assignment");
    }
  }
  result.total_cost = fixed_cost;
  return result;
}

namespace {

void validate_match(const DetectionSet& det, const GroundTruthSet& gt,
                    const MatchResult& match) {
  const int64_t nq = det.num_queries();
  const int64_t ng = gt.size();
  if (gt.boxes.size() != gt.labels.size()) {
    throw ContractError("detection_loss: ground truth has " +
                        std::to_string(gt.labels.size()) + " labels but " +
                        std::to_string(gt.boxes.size()) + " boxes");
  }
  if (static_cast<int64_t>(match.pairs.size()) != ng) {
    throw ContractError("detection_loss: match covers " +
                        std::to_string(match.pairs.size()) + " pairs for " +
                        std::to_string(ng) + " objects");
  }
  std::vector<char> q_seen(static_cast<size_t>(nq), 0);
  std::vector<char> g_seen(static_cast<size_t>(ng), 0);
  for (const auto& [q, g] : match.pairs) {
    if (q < 0 || q >= nq || g < 0 || g >= ng) {
      throw ContractError("detection_loss: match pair (" + std::to_string(q) +
                          ", " + std::to_string(g) + ") out of range");
    }
    if (q_seen[static_cast<size_t>(q)]++) {
      throw ContractError("detection_loss: query " + std::to_string(q) +
                          " matched twice");
    }
    if (g_seen[static_cast<size_t>(g)]++) {
      throw ContractError("detection_loss: object " + std::to_string(g) +
                          " matched twice");
    }
  }
  const int64_t nc = det.num_classes();
  for (int64_t label : gt.labels) {
    if (label < 0 || label >= nc) {
      throw RangeError("detection_loss: ground-truth label " +
                       std::to_string(label) + " outside [0, " +
                       std::to_string(nc) + ")");
    }
  }
}

}  // namespace

DetectionLossBreakdown detection_loss(const DetectionSet& det,
                                      const GroundTruthSet& gt,
                                      const MatchResult& match,
                                      const DetectionLossWeights& w) {
  validate_match(det, gt, match);
  const int64_t nq = det.num_queries();
  const int64_t nc = det.num_classes();
  const int64_t ng = gt.size();

  std::vector<int64_t> target(static_cast<size_t>(nq), nc);  // no-object
  for (const auto& [q, g] : match.pairs)
    target[static_cast<size_t>(q)] = gt.labels[static_cast<size_t>(g)];

  double weighted_nll = 0.0;
  double weight_sum = 0.0;
  for (int64_t i = 0; i < nq; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k <= nc; ++k) mx = std::max(mx, det.class_logits.at(i, k));
    double denom = 0.0;
    for (int64_t k = 0; k <= nc; ++k) denom += std::exp(det.class_logits.at(i, k) - mx);
    const double nll = std::log(denom) + mx - det.class_logits.at(i, target[static_cast<size_t>(i)]);
    const double wi = target[static_cast<size_t>(i)] == nc ? w.no_object : 1.0;
    weighted_nll += wi * nll;
    weight_sum += wi;
  }
  const double ce = weight_sum > 0.0 ? weighted_nll / weight_sum : 0.0;

  double l1 = 0.0;
  double giou_loss = 0.0;
  for (const auto& [q, g] : match.pairs) {
    const Box bp = det.box(q);
    const Box& bg = gt.boxes[static_cast<size_t>(g)];
    for (int d = 0; d < 4; ++d) l1 += std::abs(bp[d] - bg[d]);
    giou_loss += 1.0 - box_giou(bp, bg);
  }
  if (ng > 0) {
    l1 /= static_cast<double>(ng);
    giou_loss /= static_cast<double>(ng);
  }

  DetectionLossBreakdown out;
  out.cls = w.cls * ce;
  out.l1 = w.l1 * l1;
  out.giou = w.giou * giou_loss;
  out.total = out.cls + out.l1 + out.giou;
  return out;
}

ad::Var detection_loss_var(ad::Tape& tape, ad::Var class_logits, ad::Var boxes,
                           const GroundTruthSet& gt, const MatchResult& match,
                           const DetectionLossWeights& w,
                           DetectionLossBreakdown* breakdown) {
  const Tensor& logits_val = tape.value(class_logits);
  const Tensor& boxes_val = tape.value(boxes);
  DetectionSet snapshot{logits_val, boxes_val};
  validate_match(snapshot, gt, match);

  const int64_t nq = logits_val.dim(0);
  const int64_t nc = logits_val.dim(1) - 1;
  const int64_t ng = gt.size();

  std::vector<int64_t> target(static_cast<size_t>(nq), nc);
  for (const auto& [q, g] : match.pairs)
    target[static_cast<size_t>(q)] = gt.labels[static_cast<size_t>(g)];
  std::vector<double> class_weight(static_cast<size_t>(nc) + 1, 1.0);
  class_weight.back() = w.no_object;

  ad::Var ce = tape.cross_entropy_rows(class_logits, target, class_weight);
  ad::Var total = tape.scale(ce, w.cls);
  double l1_value = 0.0;
  double giou_value = 0.0;

  if (ng > 0) {
    // Matched prediction boxes in object order, against constant targets.
    std::vector<std::pair<int64_t, int64_t>> by_gt = match.pairs;
    std::sort(by_gt.begin(), by_gt.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    std::vector<int64_t> rows;
    rows.reserve(static_cast<size_t>(ng));
    Tensor tgt = Tensor::zeros({ng, 4});
    for (int64_t g = 0; g < ng; ++g) {
      rows.push_back(by_gt[static_cast<size_t>(g)].first);
      for (int d = 0; d < 4; ++d)
        tgt.at(g, d) = gt.boxes[static_cast<size_t>(g)][static_cast<size_t>(d)];
    }
    ad::Var pb = tape.gather_rows(boxes, rows);

    ad::Var diff = tape.sub(pb, tape.leaf(tgt));
    ad::Var l1 = tape.scale(tape.sum(tape.abs(diff)), w.l1 / static_cast<double>(ng));

    // GIoU assembled from differentiable primitives; min/max of two tensors
    // via relu so gradients follow the active side.
    auto vmax = [&](ad::Var a, ad::Var b) { return tape.add(a, tape.relu(tape.sub(b, a))); };
    auto vmin = [&](ad::Var a, ad::Var b) { return tape.sub(a, tape.relu(tape.sub(a, b))); };
    auto col = [&](ad::Var t, int64_t c) { return tape.slice_cols(t, c, 1); };

    ad::Var half_w = tape.scale(col(pb, 2), 0.5);
    ad::Var half_h = tape.scale(col(pb, 3), 0.5);
    ad::Var px1 = tape.sub(col(pb, 0), half_w);
    ad::Var px2 = tape.add(col(pb, 0), half_w);
    ad::Var py1 = tape.sub(col(pb, 1), half_h);
    ad::Var py2 = tape.add(col(pb, 1), half_h);

    Tensor tx1 = Tensor::zeros({ng, 1}), tx2 = Tensor::zeros({ng, 1});
    Tensor ty1 = Tensor::zeros({ng, 1}), ty2 = Tensor::zeros({ng, 1});
    Tensor tarea = Tensor::zeros({ng, 1});
    for (int64_t g = 0; g < ng; ++g) {
      const Corners c = to_corners(gt.boxes[static_cast<size_t>(g)]);
      tx1.at(g, 0) = c.x1;
      tx2.at(g, 0) = c.x2;
      ty1.at(g, 0) = c.y1;
      ty2.at(g, 0) = c.y2;
      tarea.at(g, 0) = (c.x2 - c.x1) * (c.y2 - c.y1);
    }
    ad::Var gx1 = tape.leaf(tx1), gx2 = tape.leaf(tx2);
    ad::Var gy1 = tape.leaf(ty1), gy2 = tape.leaf(ty2);
    ad::Var garea = tape.leaf(tarea);

    ad::Var iw = tape.relu(tape.sub(vmin(px2, gx2), vmax(px1, gx1)));
    ad::Var ih = tape.relu(tape.sub(vmin(py2, gy2), vmax(py1, gy1)));
    ad::Var inter = tape.mul(iw, ih);
    ad::Var parea = tape.mul(col(pb, 2), col(pb, 3));
    ad::Var uni = tape.sub(tape.add(parea, garea), inter);
    ad::Var iou = tape.div(inter, uni);

    ad::Var ew = tape.sub(vmax(px2, gx2), vmin(px1, gx1));
    ad::Var eh = tape.sub(vmax(py2, gy2), vmin(py1, gy1));
    ad::Var earea = tape.mul(ew, eh);
    ad::Var giou = tape.sub(iou, tape.div(tape.sub(earea, uni), earea));
    ad::Var one_minus = tape.add_scalar(tape.neg(giou), 1.0);
    ad::Var giou_term = tape.scale(tape.sum(one_minus), w.giou / static_cast<double>(ng));

    total = tape.add(total, tape.add(l1, giou_term));
    l1_value = tape.value(l1).scalar();
    giou_value = tape.value(giou_term).scalar();
  }

  if (breakdown) {
    breakdown->cls = w.cls * tape.value(ce).scalar();
    breakdown->l1 = l1_value;
    breakdown->giou = giou_value;
    breakdown->total = tape.value(total).scalar();
  }
  return total;
}

}  // namespace ssldetr
