#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssldetr/data.hpp"
#include "ssldetr/detection_set.hpp"

namespace ssldetr {

// Evaluation-side box records, in absolute pixels, COCO xywh convention.
struct EvalDetection {
  int64_t image_id = 0;
  int64_t category = 0;  // contiguous class id
  double score = 0.0;
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

struct EvalAnnotation {
  int64_t image_id = 0;
  int64_t category = 0;
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

enum class SizeBucket { kSmall, kMedium, kLarge };

// Absolute-pixel-area buckets: small < 32^2, 32^2 <= medium < 96^2,
// large >= 96^2.
SizeBucket bucket_by_size(double box_w, double box_h);

struct EvalReport {
  std::array<double, 10> ap_per_threshold{};  // IoU 0.50, 0.55, ..., 0.95
  double map = -1.0;                          // mean of ap_per_threshold
  double ap50 = -1.0;
  double ap75 = -1.0;
  double ap_small = -1.0;
  double ap_medium = -1.0;
  double ap_large = -1.0;
  std::map<int64_t, double> per_class;  // AP averaged over thresholds
};

// 101-point interpolated AP for one class at one IoU threshold, COCO
// protocol: detections confidence-descending, each ground truth matched at
// most once, at most 100 detections per image. Returns -1 when the class has
// no ground truth.
double compute_ap_at_iou(const std::vector<EvalDetection>& detections,
                         const std::vector<EvalAnnotation>& ground_truth,
                         double iou_threshold, int64_t class_id);

// Full COCO-protocol report over classes [0, num_classes).
EvalReport compute_coco_map(const std::vector<EvalDetection>& detections,
                            const std::vector<EvalAnnotation>& ground_truth,
                            int64_t num_classes);

std::string eval_report_to_json(const EvalReport& report);

// Ground truth of a dataset in evaluation form (normalized boxes scaled back
// to pixels).
std::vector<EvalAnnotation> eval_annotations(const DetectionDataset& dataset);

// One image's predictions in evaluation form: per query, softmax over
// classes; score and label are the best non-background class.
std::vector<EvalDetection> detections_from(const DetectionSet& det,
                                           int64_t image_id, int64_t width,
                                           int64_t height);

// COCO results-format ingestion ([{image_id, category_id, bbox, score}]);
// category ids are translated through the dataset's source-id mapping.
std::vector<EvalDetection> load_detections_json(const std::string& path,
                                                const DetectionDataset& dataset);

}  // namespace ssldetr
