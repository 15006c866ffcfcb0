#include <doctest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "ssldetr/data.hpp"
#include "ssldetr/errors.hpp"
#include "ssldetr/evaluation.hpp"

using namespace ssldetr;

namespace {

EvalAnnotation gt_at(int64_t img, int64_t cat, double x, double y, double w, double h) {
  EvalAnnotation a;
  a.image_id = img;
  a.category = cat;
  a.x = x;
  a.y = y;
  a.w = w;
  a.h = h;
  return a;
}

EvalDetection dt_at(int64_t img, int64_t cat, double score, double x, double y,
                    double w, double h) {
  EvalDetection d;
  d.image_id = img;
  d.category = cat;
  d.score = score;
  d.x = x;
  d.y = y;
  d.w = w;
  d.h = h;
  return d;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("size buckets split at the canonical areas") {
  CHECK(bucket_by_size(10, 10) == SizeBucket::kSmall);
  CHECK(bucket_by_size(31.9, 32) == SizeBucket::kSmall);
  CHECK(bucket_by_size(32, 32) == SizeBucket::kMedium);
  CHECK(bucket_by_size(95, 96) == SizeBucket::kMedium);
  CHECK(bucket_by_size(96, 96) == SizeBucket::kLarge);
  CHECK(bucket_by_size(500, 400) == SizeBucket::kLarge);
}

TEST_CASE("report matches the frozen five-image goldens") {
  DetectionDataset ds = load_coco(testutil::data_path("micro_gt.json"), "");
  REQUIRE(ds.images.size() == 5);
  REQUIRE(ds.num_classes() == 3);
  const std::vector<EvalAnnotation> gts = eval_annotations(ds);
  REQUIRE(gts.size() == 10);
  const std::vector<EvalDetection> dts =
      load_detections_json(testutil::data_path("micro_dt.json"), ds);
  REQUIRE(dts.size() == 15);

  const EvalReport report = compute_coco_map(dts, gts, 3);

  nlohmann::json golden =
      nlohmann::json::parse(testutil::read_file(testutil::data_path("micro_golden.json")));
  CHECK(report.map == doctest::Approx(golden.at("ap").get<double>()).epsilon(1e-6));
  CHECK(report.ap50 == doctest::Approx(golden.at("ap50").get<double>()).epsilon(1e-6));
  CHECK(report.ap75 == doctest::Approx(golden.at("ap75").get<double>()).epsilon(1e-6));
  CHECK(report.ap_small ==
        doctest::Approx(golden.at("ap_small").get<double>()).epsilon(1e-6));
  CHECK(report.ap_medium ==
        doctest::Approx(golden.at("ap_medium").get<double>()).epsilon(1e-6));
  CHECK(report.ap_large ==
        doctest::Approx(golden.at("ap_large").get<double>()).epsilon(1e-6));
  const auto thresholds = golden.at("ap_per_threshold").get<std::vector<double>>();
  REQUIRE(thresholds.size() == 10);
  for (size_t t = 0; t < 10; ++t) {
    CHECK(report.ap_per_threshold[t] == doctest::Approx(thresholds[t]).epsilon(1e-6));
  }
  for (const auto& [key, value] : golden.at("per_class").items()) {
    const int64_t k = std::stoll(key);
    REQUIRE(report.per_class.count(k) == 1);
    CHECK(report.per_class.at(k) == doctest::Approx(value.get<double>()).epsilon(1e-6));
  }
}

TEST_CASE("the mean-over-thresholds identity holds exactly") {
  DetectionDataset ds = load_coco(testutil::data_path("micro_gt.json"), "");
  const std::vector<EvalDetection> dts =
      load_detections_json(testutil::data_path("micro_dt.json"), ds);
  const EvalReport report = compute_coco_map(dts, eval_annotations(ds), 3);

  double total = 0.0;
  for (double v : report.ap_per_threshold) total += v;
  CHECK(report.map == total / 10.0);  // bitwise
  CHECK(report.ap50 == report.ap_per_threshold[0]);
  CHECK(report.ap75 == report.ap_per_threshold[5]);
}

TEST_CASE("perfect detections score a full AP") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20),
                                     gt_at(1, 1, 50, 50, 100, 100),
                                     gt_at(2, 0, 5, 5, 25, 25)};
  std::vector<EvalDetection> dts = {dt_at(1, 0, 0.9, 10, 10, 20, 20),
                                    dt_at(1, 1, 0.8, 50, 50, 100, 100),
                                    dt_at(2, 0, 0.95, 5, 5, 25, 25)};
  const EvalReport report = compute_coco_map(dts, gts, 2);
  CHECK(report.map == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.ap50 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.ap75 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.per_class.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.per_class.at(1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.ap_small == doctest::Approx(1.0).epsilon(1e-12));   // 20x20, 25x25
  CHECK(report.ap_large == doctest::Approx(1.0).epsilon(1e-12));   // 100x100
  CHECK(report.ap_medium == -1.0);  // no ground truth in the bucket
}

TEST_CASE("a class without ground truth is excluded, not zeroed") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20)};
  std::vector<EvalDetection> dts = {dt_at(1, 0, 0.9, 10, 10, 20, 20),
                                    dt_at(1, 1, 0.8, 40, 40, 20, 20)};  // class 1: FP only
  const EvalReport report = compute_coco_map(dts, gts, 2);
  CHECK(report.per_class.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.per_class.at(1) == -1.0);
  CHECK(report.map == doctest::Approx(1.0).epsilon(1e-12));  // mean skips the sentinel
}

TEST_CASE("duplicate detections of one object are penalized") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20),
                                     gt_at(1, 0, 100, 100, 20, 20)};
  std::vector<EvalDetection> dts = {
      dt_at(1, 0, 0.9, 10, 10, 20, 20),
      dt_at(1, 0, 0.8, 10, 10, 20, 20),  // duplicate, becomes an FP
      dt_at(1, 0, 0.7, 100, 100, 20, 20)};
  const EvalReport report = compute_coco_map(dts, gts, 1);
  const double expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
  CHECK(report.map == doctest::Approx(expected).epsilon(1e-12));

  // without the duplicate the class is perfect
  std::vector<EvalDetection> clean = {dt_at(1, 0, 0.9, 10, 10, 20, 20),
                                      dt_at(1, 0, 0.7, 100, 100, 20, 20)};
  CHECK(compute_coco_map(clean, gts, 1).map == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("only the hundred most confident detections per image count") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20)};

  std::vector<EvalDetection> flood;
  for (int i = 0; i < 120; ++i) {
    flood.push_back(dt_at(1, 0, 0.9 - 0.001 * i, 500.0 + 30.0 * i, 500, 20, 20));
  }
  flood.push_back(dt_at(1, 0, 0.3, 10, 10, 20, 20));  // rank 121: discarded
  CHECK(compute_coco_map(flood, gts, 1).map == doctest::Approx(0.0).epsilon(1e-12));

  std::vector<EvalDetection> modest(flood.begin(), flood.begin() + 60);
  modest.push_back(dt_at(1, 0, 0.3, 10, 10, 20, 20));  // rank 61: kept
  CHECK(compute_coco_map(modest, gts, 1).map ==
        doctest::Approx(1.0 / 61.0).epsilon(1e-12));
}

TEST_CASE("single-threshold AP behaves at its extremes") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20)};
  std::vector<EvalDetection> dts = {dt_at(1, 0, 0.9, 12, 12, 20, 20)};
  // IoU of the shifted box: inter 18*18=324, union 800-324=476
  const double iou = 324.0 / 476.0;
  CHECK(compute_ap_at_iou(dts, gts, iou - 0.01, 0) == doctest::Approx(1.0));
  CHECK(compute_ap_at_iou(dts, gts, iou + 0.01, 0) == doctest::Approx(0.0));
  CHECK(compute_ap_at_iou(dts, gts, 0.5, 1) == -1.0);  // class 1 has no gt
  CHECK_THROWS_AS(compute_ap_at_iou(dts, gts, 0.0, 0), RangeError);
  CHECK_THROWS_AS(compute_ap_at_iou(dts, gts, 1.5, 0), RangeError);
}

TEST_CASE("invalid inputs are rejected") {
  std::vector<EvalAnnotation> gts = {gt_at(1, 0, 10, 10, 20, 20)};
  std::vector<EvalDetection> dts = {dt_at(1, 0, 0.9, 10, 10, 20, 20)};
  CHECK_THROWS_AS(compute_coco_map(dts, gts, 0), ConfigError);
  CHECK_THROWS_AS(compute_coco_map({dt_at(1, 5, 0.9, 0, 0, 1, 1)}, gts, 1), RangeError);
  CHECK_THROWS_AS(compute_coco_map(dts, {gt_at(1, 7, 0, 0, 1, 1)}, 1), RangeError);
  CHECK_THROWS_AS(compute_coco_map({dt_at(1, 0, 0.9, 0, 0, -1, 1)}, gts, 1), RangeError);
  std::vector<EvalDetection> nan_dt = {dt_at(1, 0, 0.9, 0, 0, 1, 1)};
  nan_dt[0].x = std::nan("");
  CHECK_THROWS_AS(compute_coco_map(nan_dt, gts, 1), RangeError);
}

TEST_CASE("dataset ground truth converts back to pixel boxes") {
  DetectionDataset ds;
  ImageRecord rec;
  rec.id = 42;
  rec.width = 100;
  rec.height = 200;
  rec.gt.labels = {1};
  rec.gt.boxes = {{0.25, 0.2, 0.3, 0.2}};
  ds.images.push_back(rec);
  const std::vector<EvalAnnotation> anns = eval_annotations(ds);
  REQUIRE(anns.size() == 1);
  CHECK(anns[0].image_id == 42);
  CHECK(anns[0].category == 1);
  CHECK(anns[0].x == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(anns[0].y == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(anns[0].w == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(anns[0].h == doctest::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("query outputs convert to scored pixel detections") {
  DetectionSet det;
  det.class_logits = Tensor({2, 3});
  det.class_logits.at(0, 0) = 2.0;  // class 0 dominates
  det.class_logits.at(1, 1) = 1.0;  // background dominates, class 1 best real
  det.class_logits.at(1, 2) = 3.0;
  det.boxes = Tensor({2, 4});
  det.boxes.at(0, 0) = 0.5;
  det.boxes.at(0, 1) = 0.5;
  det.boxes.at(0, 2) = 0.2;
  det.boxes.at(0, 3) = 0.4;
  det.boxes.at(1, 0) = 0.1;
  det.boxes.at(1, 1) = 0.1;
  det.boxes.at(1, 2) = 0.1;
  det.boxes.at(1, 3) = 0.1;

  const std::vector<EvalDetection> out = detections_from(det, 7, 100, 200);
  REQUIRE(out.size() == 2);
  CHECK(out[0].image_id == 7);
  CHECK(out[0].category == 0);
  const double p0 = std::exp(2.0) / (std::exp(2.0) + 2.0);
  CHECK(out[0].score == doctest::Approx(p0).epsilon(1e-12));
  CHECK(out[0].x == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(out[0].y == doctest::Approx(60.0).epsilon(1e-12));
  CHECK(out[0].w == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(out[0].h == doctest::Approx(80.0).epsilon(1e-12));

  CHECK(out[1].category == 1);  // best non-background even when background wins
  const double denom = 1.0 + std::exp(1.0) + std::exp(3.0);
  CHECK(out[1].score == doctest::Approx(std::exp(1.0) / denom).epsilon(1e-12));
}

TEST_CASE("results files translate source category ids") {
  DetectionDataset ds = load_coco(testutil::data_path("micro_gt.json"), "");
  testutil::TempDir dir("results");
  const std::string path = dir.file("dt.json");
  {
    std::ofstream os(path);
    os << R"([{"image_id": 1, "category_id": 3, "bbox": [1, 2, 3, 4], "score": 0.5}])";
  }
  const std::vector<EvalDetection> dts = load_detections_json(path, ds);
  REQUIRE(dts.size() == 1);
  CHECK(dts[0].category == 2);  // source id 3 -> contiguous 2
  CHECK(dts[0].x == 1.0);
  CHECK(dts[0].h == 4.0);
  CHECK(dts[0].score == 0.5);

  {
    std::ofstream os(dir.file("badcat.json"));
    os << R"([{"image_id": 1, "category_id": 99, "bbox": [1, 2, 3, 4], "score": 0.5}])";
  }
  CHECK_THROWS_AS(load_detections_json(dir.file("badcat.json"), ds), IoError);
  {
    std::ofstream os(dir.file("notarray.json"));
    os << R"({"image_id": 1})";
  }
  CHECK_THROWS_AS(load_detections_json(dir.file("notarray.json"), ds), IoError);
  CHECK_THROWS_AS(load_detections_json(dir.file("absent.json"), ds), IoError);
}

TEST_CASE("reports serialize to JSON with every field") {
  DetectionDataset ds = load_coco(testutil::data_path("micro_gt.json"), "");
  const std::vector<EvalDetection> dts =
      load_detections_json(testutil::data_path("micro_dt.json"), ds);
  const EvalReport report = compute_coco_map(dts, eval_annotations(ds), 3);
  nlohmann::json j = nlohmann::json::parse(eval_report_to_json(report));
  CHECK(j.at("ap").get<double>() == report.map);
  CHECK(j.at("ap50").get<double>() == report.ap50);
  CHECK(j.at("ap75").get<double>() == report.ap75);
  CHECK(j.at("ap_small").get<double>() == report.ap_small);
  CHECK(j.at("ap_medium").get<double>() == report.ap_medium);
  CHECK(j.at("ap_large").get<double>() == report.ap_large);
  CHECK(j.at("ap_per_threshold").size() == 10);
  CHECK(j.at("per_class").size() == 3);
  CHECK(j.at("per_class").at("0").get<double>() == report.per_class.at(0));
}

}  // TEST_SUITE
