#include "ssldetr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "ssldetr/errors.hpp"

namespace ssldetr {

SizeBucket bucket_by_size(double box_w, double box_h) {
  const double area = box_w * box_h;
  if (area < 32.0 * 32.0) return SizeBucket::kSmall;
  if (area < 96.0 * 96.0) return SizeBucket::kMedium;
  return SizeBucket::kLarge;
}

namespace {

constexpr int kNumThresholds = 10;
constexpr int kNumRecallPoints = 101;
constexpr int kMaxDetections = 100;

double iou_threshold_at(int i) { return 0.5 + 0.05 * static_cast<double>(i); }

// Area ranges, bounds inclusive as in the canonical COCO evaluator: a box
// whose area equals a bucket edge is counted in both adjacent buckets there.
constexpr int kAreaAll = 0;
constexpr int kAreaSmall = 1;
constexpr int kAreaMedium = 2;
constexpr int kAreaLarge = 3;
constexpr double kAreaLo[4] = {0.0, 0.0, 1024.0, 9216.0};
constexpr double kAreaHi[4] = {1e10, 1024.0, 9216.0, 1e10};

struct DtRec {
  double score;
  double area;
  double box[4];  // xywh
};

struct GtRec {
  double area;
  double box[4];
};

double box_iou_xywh(const double a[4], const double b[4]) {
  const double ax2 = a[0] + a[2];
  const double ay2 = a[1] + a[3];
  const double bx2 = b[0] + b[2];
  const double by2 = b[1] + b[3];
  const double iw = std::min(ax2, bx2) - std::max(a[0], b[0]);
  const double ih = std::min(ay2, by2) - std::max(a[1], b[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void validate_boxes(const std::vector<EvalDetection>& dts,
                    const std::vector<EvalAnnotation>& gts) {
  for (const auto& d : dts) {
    if (!std::isfinite(d.x) || !std::isfinite(d.y) || !std::isfinite(d.w) ||
        !std::isfinite(d.h) || !std::isfinite(d.score) || d.w < 0.0 || d.h < 0.0) {
      throw RangeError("evaluation: invalid detection box on image " +
                       std::to_string(d.image_id));
    }
  }
  for (const auto& g : gts) {
    if (!std::isfinite(g.x) || !std::isfinite(g.y) || !std::isfinite(g.w) ||
        !std::isfinite(g.h) || g.w < 0.0 || g.h < 0.0) {
      throw RangeError("evaluation: invalid ground-truth box on image " +
                       std::to_string(g.image_id));
    }
  }
}

// One (image, category, area-range) matching pass at every threshold.
struct ImageEval {
  std::vector<double> scores;                          // dt score order
  std::array<std::vector<bool>, kNumThresholds> tp;    // matched a real gt
  std::array<std::vector<bool>, kNumThresholds> ignore;
  int64_t num_gt = 0;  // non-ignored
};

ImageEval evaluate_image(const std::vector<DtRec>& dts_in,
                         const std::vector<GtRec>& gts, int area) {
  ImageEval out;

  // Stable confidence-descending order, capped at 100 detections.
  std::vector<size_t> dtind(dts_in.size());
  for (size_t i = 0; i < dtind.size(); ++i) dtind[i] = i;
  std::stable_sort(dtind.begin(), dtind.end(), [&](size_t a, size_t b) {
    return dts_in[a].score > dts_in[b].score;
  });
  if (dtind.size() > kMaxDetections) dtind.resize(kMaxDetections);
  std::vector<const DtRec*> dts;
  dts.reserve(dtind.size());
  for (size_t i : dtind) dts.push_back(&dts_in[i]);

  // Ground truth with in-range entries first (stable).
  std::vector<char> gt_ignore_flag(gts.size());
  for (size_t g = 0; g < gts.size(); ++g) {
    gt_ignore_flag[g] =
        gts[g].area < kAreaLo[area] || gts[g].area > kAreaHi[area];
  }
  std::vector<size_t> gtind(gts.size());
  for (size_t i = 0; i < gtind.size(); ++i) gtind[i] = i;
  std::stable_sort(gtind.begin(), gtind.end(), [&](size_t a, size_t b) {
    return gt_ignore_flag[a] < gt_ignore_flag[b];
  });
  std::vector<const GtRec*> gt;
  std::vector<char> gt_ig;
  for (size_t i : gtind) {
    gt.push_back(&gts[i]);
    gt_ig.push_back(gt_ignore_flag[i]);
  }
  for (char ig : gt_ig) {
    if (!ig) ++out.num_gt;
  }

  std::vector<double> iou(dts.size() * gt.size());
  for (size_t d = 0; d < dts.size(); ++d) {
    for (size_t g = 0; g < gt.size(); ++g) {
      iou[d * gt.size() + g] = box_iou_xywh(dts[d]->box, gt[g]->box);
    }
  }

  out.scores.reserve(dts.size());
  for (const DtRec* d : dts) out.scores.push_back(d->score);

  for (int t = 0; t < kNumThresholds; ++t) {
    out.tp[t].assign(dts.size(), false);
    out.ignore[t].assign(dts.size(), false);
    std::vector<char> gt_matched(gt.size(), 0);
    for (size_t d = 0; d < dts.size(); ++d) {
      double best = std::min(iou_threshold_at(t), 1.0 - 1e-10);
      int64_t m = -1;
      for (size_t g = 0; g < gt.size(); ++g) {
        if (gt_matched[g]) continue;
        // In-range candidates are exhausted once the list reaches the
        // ignored tail; keep an in-range match rather than trading it away.
        if (m > -1 && !gt_ig[static_cast<size_t>(m)] && gt_ig[g]) break;
        if (iou[d * gt.size() + g] < best) continue;
        best = iou[d * gt.size() + g];
        m = static_cast<int64_t>(g);
      }
      if (m == -1) {
        // Unmatched detections outside the area range do not count as FP.
        out.ignore[t][d] =
            dts[d]->area < kAreaLo[area] || dts[d]->area > kAreaHi[area];
        continue;
      }
      gt_matched[static_cast<size_t>(m)] = 1;
      if (gt_ig[static_cast<size_t>(m)]) {
        out.ignore[t][d] = true;
      } else {
        out.tp[t][d] = true;
      }
    }
  }
  return out;
}

// 101-point interpolated AP from globally score-sorted tp/ignore flags.
double interpolated_ap(const std::vector<double>& scores,
                       const std::vector<bool>& tp,
                       const std::vector<bool>& ignore, int64_t num_gt) {
  if (num_gt == 0) return -1.0;
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<double> precision;
  std::vector<double> recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  double tp_sum = 0.0;
  double fp_sum = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  for (size_t i : order) {
    if (ignore[i]) continue;
    if (tp[i]) {
      tp_sum += 1.0;
    } else {
      fp_sum += 1.0;
    }
    recall.push_back(tp_sum / static_cast<double>(num_gt));
    precision.push_back(tp_sum / (tp_sum + fp_sum + eps));
  }
  for (size_t i = precision.size(); i > 1; --i) {
    if (precision[i - 1] > precision[i - 2]) precision[i - 2] = precision[i - 1];
  }

  double total = 0.0;
  for (int r = 0; r < kNumRecallPoints; ++r) {
    const double thr = static_cast<double>(r) * 0.01;
    const size_t idx = static_cast<size_t>(
        std::lower_bound(recall.begin(), recall.end(), thr) - recall.begin());
    if (idx < precision.size()) total += precision[idx];
  }
  return total / static_cast<double>(kNumRecallPoints);
}

// AP table [class][area][threshold]; -1 where the class has no in-range gt.
std::vector<std::array<std::array<double, kNumThresholds>, 4>> ap_table(
    const std::vector<EvalDetection>& detections,
    const std::vector<EvalAnnotation>& ground_truth, int64_t num_classes) {
  validate_boxes(detections, ground_truth);

  // (class, image id ascending) -> records in input order.
  std::map<std::pair<int64_t, int64_t>, std::vector<DtRec>> dt_map;
  std::map<std::pair<int64_t, int64_t>, std::vector<GtRec>> gt_map;
  std::vector<int64_t> image_ids;
  for (const auto& d : detections) {
    dt_map[{d.category, d.image_id}].push_back(
        {d.score, d.w * d.h, {d.x, d.y, d.w, d.h}});
    image_ids.push_back(d.image_id);
  }
  for (const auto& g : ground_truth) {
    gt_map[{g.category, g.image_id}].push_back(
        {g.w * g.h, {g.x, g.y, g.w, g.h}});
    image_ids.push_back(g.image_id);
  }
  std::sort(image_ids.begin(), image_ids.end());
  image_ids.erase(std::unique(image_ids.begin(), image_ids.end()), image_ids.end());

  const std::vector<DtRec> no_dts;
  const std::vector<GtRec> no_gts;
  std::vector<std::array<std::array<double, kNumThresholds>, 4>> table(
      static_cast<size_t>(num_classes));
  for (int64_t k = 0; k < num_classes; ++k) {
    for (int area = 0; area < 4; ++area) {
      std::vector<double> scores;
      std::array<std::vector<bool>, kNumThresholds> tp;
      std::array<std::vector<bool>, kNumThresholds> ignore;
      int64_t num_gt = 0;
      for (int64_t img : image_ids) {
        auto dit = dt_map.find({k, img});
        auto git = gt_map.find({k, img});
        const ImageEval ev = evaluate_image(
            dit == dt_map.end() ? no_dts : dit->second,
            git == gt_map.end() ? no_gts : git->second, area);
        num_gt += ev.num_gt;
        scores.insert(scores.end(), ev.scores.begin(), ev.scores.end());
        for (int t = 0; t < kNumThresholds; ++t) {
          tp[t].insert(tp[t].end(), ev.tp[t].begin(), ev.tp[t].end());
          ignore[t].insert(ignore[t].end(), ev.ignore[t].begin(), ev.ignore[t].end());
        }
      }
      for (int t = 0; t < kNumThresholds; ++t) {
        table[static_cast<size_t>(k)][static_cast<size_t>(area)][static_cast<size_t>(t)] =
            interpolated_ap(scores, tp[t], ignore[t], num_gt);
      }
    }
  }
  return table;
}

double mean_over_valid(const std::vector<double>& values) {
  double total = 0.0;
  int64_t n = 0;
  for (double v : values) {
    if (v > -1.0) {
      total += v;
      ++n;
    }
  }
  return n == 0 ? -1.0 : total / static_cast<double>(n);
}

}  // namespace

double compute_ap_at_iou(const std::vector<EvalDetection>& detections,
                         const std::vector<EvalAnnotation>& ground_truth,
                         double iou_threshold, int64_t class_id) {
  if (iou_threshold <= 0.0 || iou_threshold > 1.0) {
    throw RangeError("compute_ap_at_iou: threshold must be in (0, 1]");
  }
  validate_boxes(detections, ground_truth);

  std::map<int64_t, std::vector<DtRec>> dt_map;
  std::map<int64_t, std::vector<GtRec>> gt_map;
  std::vector<int64_t> image_ids;
  for (const auto& d : detections) {
    if (d.category != class_id) continue;
    dt_map[d.image_id].push_back({d.score, d.w * d.h, {d.x, d.y, d.w, d.h}});
    image_ids.push_back(d.image_id);
  }
  for (const auto& g : ground_truth) {
    if (g.category != class_id) continue;
    gt_map[g.image_id].push_back({g.w * g.h, {g.x, g.y, g.w, g.h}});
    image_ids.push_back(g.image_id);
  }
  std::sort(image_ids.begin(), image_ids.end());
  image_ids.erase(std::unique(image_ids.begin(), image_ids.end()), image_ids.end());

  // Single custom threshold: reuse the machinery with a one-slot loop.
  std::vector<double> scores;
  std::vector<bool> tp;
  std::vector<bool> ignore;
  int64_t num_gt = 0;
  const std::vector<DtRec> no_dts;
  const std::vector<GtRec> no_gts;
  for (int64_t img : image_ids) {
    auto dit = dt_map.find(img);
    auto git = gt_map.find(img);
    const std::vector<DtRec>& dts_in = dit == dt_map.end() ? no_dts : dit->second;
    const std::vector<GtRec>& gts = git == gt_map.end() ? no_gts : git->second;

    std::vector<size_t> dtind(dts_in.size());
    for (size_t i = 0; i < dtind.size(); ++i) dtind[i] = i;
    std::stable_sort(dtind.begin(), dtind.end(), [&](size_t a, size_t b) {
      return dts_in[a].score > dts_in[b].score;
    });
    if (dtind.size() > kMaxDetections) dtind.resize(kMaxDetections);

    std::vector<char> gt_matched(gts.size(), 0);
    num_gt += static_cast<int64_t>(gts.size());
    for (size_t di : dtind) {
      const DtRec& d = dts_in[di];
      double best = std::min(iou_threshold, 1.0 - 1e-10);
      int64_t m = -1;
      for (size_t g = 0; g < gts.size(); ++g) {
        if (gt_matched[g]) continue;
        const double v = box_iou_xywh(d.box, gts[g].box);
        if (v < best) continue;
        best = v;
        m = static_cast<int64_t>(g);
      }
      scores.push_back(d.score);
      if (m == -1) {
        tp.push_back(false);
      } else {
        gt_matched[static_cast<size_t>(m)] = 1;
        tp.push_back(true);
      }
      ignore.push_back(false);
    }
  }
  return interpolated_ap(scores, tp, ignore, num_gt);
}

EvalReport compute_coco_map(const std::vector<EvalDetection>& detections,
                            const std::vector<EvalAnnotation>& ground_truth,
                            int64_t num_classes) {
  if (num_classes < 1) {
    throw ConfigError("compute_coco_map: num_classes must be positive");
  }
  for (const auto& d : detections) {
    if (d.category < 0 || d.category >= num_classes) {
      throw RangeError("compute_coco_map: detection category " +
                       std::to_string(d.category) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
  for (const auto& g : ground_truth) {
    if (g.category < 0 || g.category >= num_classes) {
      throw RangeError("compute_coco_map: ground-truth category " +
                       std::to_string(g.category) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
  const auto table = ap_table(detections, ground_truth, num_classes);

  EvalReport report;
  for (int t = 0; t < kNumThresholds; ++t) {
    std::vector<double> vals;
    for (int64_t k = 0; k < num_classes; ++k) {
      vals.push_back(table[static_cast<size_t>(k)][kAreaAll][static_cast<size_t>(t)]);
    }
    report.ap_per_threshold[static_cast<size_t>(t)] = mean_over_valid(vals);
  }
  {
    double total = 0.0;
    for (double v : report.ap_per_threshold) total += v;
    report.map = total / static_cast<double>(kNumThresholds);
  }
  report.ap50 = report.ap_per_threshold[0];
  report.ap75 = report.ap_per_threshold[5];

  for (int area : {kAreaSmall, kAreaMedium, kAreaLarge}) {
    std::vector<double> vals;
    for (int64_t k = 0; k < num_classes; ++k) {
      for (int t = 0; t < kNumThresholds; ++t) {
        vals.push_back(table[static_cast<size_t>(k)][static_cast<size_t>(area)][static_cast<size_t>(t)]);
      }
    }
    const double v = mean_over_valid(vals);
    if (area == kAreaSmall) report.ap_small = v;
    if (area == kAreaMedium) report.ap_medium = v;
    if (area == kAreaLarge) report.ap_large = v;
  }

  for (int64_t k = 0; k < num_classes; ++k) {
    std::vector<double> vals;
    for (int t = 0; t < kNumThresholds; ++t) {
      vals.push_back(table[static_cast<size_t>(k)][kAreaAll][static_cast<size_t>(t)]);
    }
    report.per_class[k] = mean_over_valid(vals);
  }
  return report;
}

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["ap"] = report.map;
  j["ap50"] = report.ap50;
  j["ap75"] = report.ap75;
  j["ap_small"] = report.ap_small;
  j["ap_medium"] = report.ap_medium;
  j["ap_large"] = report.ap_large;
  j["ap_per_threshold"] = report.ap_per_threshold;
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [k, v] : report.per_class) per_class[std::to_string(k)] = v;
  j["per_class"] = std::move(per_class);
  return j.dump();
}

std::vector<EvalAnnotation> eval_annotations(const DetectionDataset& dataset) {
  std::vector<EvalAnnotation> out;
  for (const auto& rec : dataset.images) {
    const double w_img = static_cast<double>(rec.width);
    const double h_img = static_cast<double>(rec.height);
    for (int64_t g = 0; g < rec.gt.size(); ++g) {
      const Box& b = rec.gt.boxes[static_cast<size_t>(g)];
      EvalAnnotation a;
      a.image_id = rec.id;
      a.category = rec.gt.labels[static_cast<size_t>(g)];
      a.w = b[2] * w_img;
      a.h = b[3] * h_img;
      a.x = b[0] * w_img - a.w / 2.0;
      a.y = b[1] * h_img - a.h / 2.0;
      out.push_back(a);
    }
  }
  return out;
}

std::vector<EvalDetection> detections_from(const DetectionSet& det,
                                           int64_t image_id, int64_t width,
                                           int64_t height) {
  const int64_t nq = det.num_queries();
  const int64_t nc = det.num_classes();
  std::vector<EvalDetection> out;
  out.reserve(static_cast<size_t>(nq));
  for (int64_t q = 0; q < nq; ++q) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k <= nc; ++k) mx = std::max(mx, det.class_logits.at(q, k));
    double denom = 0.0;
    for (int64_t k = 0; k <= nc; ++k) denom += std::exp(det.class_logits.at(q, k) - mx);
    double best_p = -1.0;
    int64_t best_k = 0;
    for (int64_t k = 0; k < nc; ++k) {
      const double p = std::exp(det.class_logits.at(q, k) - mx) / denom;
      if (p > best_p) {
        best_p = p;
        best_k = k;
      }
    }
    const Box b = det.box(q);
    EvalDetection d;
    d.image_id = image_id;
    d.category = best_k;
    d.score = best_p;
    d.w = b[2] * static_cast<double>(width);
    d.h = b[3] * static_cast<double>(height);
    d.x = b[0] * static_cast<double>(width) - d.w / 2.0;
    d.y = b[1] * static_cast<double>(height) - d.h / 2.0;
    out.push_back(d);
  }
  return out;
}

std::vector<EvalDetection> load_detections_json(const std::string& path,
                                                const DetectionDataset& dataset) {
  std::ifstream is(path);
  if (!is) throw IoError(path + ": cannot open for reading");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": parse error at byte " + std::to_string(e.byte) +
                  ": " + e.what());
  }
  if (!doc.is_array()) {
    throw IoError(path + ": COCO results must be a JSON array");
  }
  std::map<int64_t, int64_t> to_contiguous;
  for (const auto& [contiguous, source] : dataset.category_source_ids) {
    to_contiguous[source] = contiguous;
  }
  std::vector<EvalDetection> out;
  for (const auto& r : doc) {
    EvalDetection d;
    d.image_id = r.at("image_id").get<int64_t>();
    const int64_t cat = r.at("category_id").get<int64_t>();
    auto it = to_contiguous.find(cat);
    if (it == to_contiguous.end()) {
      throw IoError(path + ": unknown category id " + std::to_string(cat));
    }
    d.category = it->second;
    d.score = r.at("score").get<double>();
    const auto& bb = r.at("bbox");
    d.x = bb[0].get<double>();
    d.y = bb[1].get<double>();
    d.w = bb[2].get<double>();
    d.h = bb[3].get<double>();
    out.push_back(d);
  }
  return out;
}

}  // namespace ssldetr
