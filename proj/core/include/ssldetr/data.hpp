#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssldetr/detection_set.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

struct ImageRecord {
  int64_t id = 0;
  std::string path;   // empty for generated images
  Tensor pixels;      // [3, H, W] in [0,1]; empty for path-backed images
  int64_t height = 0;
  int64_t width = 0;
  GroundTruthSet gt;  // normalized (cx, cy, w, h)
};

struct DetectionDataset {
  std::vector<ImageRecord> images;
  std::map<int64_t, std::string> classes;          // contiguous id -> name
  std::map<int64_t, int64_t> category_source_ids;  // contiguous id -> source id
  std::vector<std::string> warnings;  // validation report (missing files,
                                      // clamped boxes, ...)

  int64_t num_classes() const { return static_cast<int64_t>(classes.size()); }
  bool has_annotations() const;
};

struct SyntheticConfig {
  int64_t num_images = 500;
  int64_t image_size = 128;
  std::vector<std::string> classes = {"circle", "square", "triangle"};
  int64_t min_objects = 1;
  int64_t max_objects = 3;
  int64_t min_size = 24;   // object bounding-box side, pixels
  int64_t max_size = 48;
  uint64_t seed = 0;
};

// COCO-format annotation ingestion. Boxes arrive as pixel xywh and are stored
// normalized; category ids are remapped to contiguous [0, num_classes) in
// ascending original-id order. Out-of-bounds boxes are clamped and reported
// in `warnings`, as are image files missing under `image_root`.
DetectionDataset load_coco(const std::string& annotation_file,
                           const std::string& image_root);

// Inverse of load_coco for datasets this library produced; writes "images",
// "annotations" (bbox xywh pixels), "categories". Generated images are saved
// as PNGs next to the annotation file under `image_dir`.
void save_coco(const DetectionDataset& dataset, const std::string& annotation_file,
               const std::string& image_dir);

// Unlabeled ingestion: every PNG/JPEG under `folder` (sorted by filename)
// becomes an image with an empty GroundTruthSet.
DetectionDataset load_image_folder(const std::string& folder);

// Deterministic shapes-on-noise generator; ground-truth boxes are the exact
// tight bounds of the drawn pixels.
DetectionDataset generate_synthetic(const SyntheticConfig& config);

// Pixels for a record, reading from disk when not held in memory.
Tensor load_pixels(const ImageRecord& record);

// Bilinear resize to target_size x target_size, which must be divisible by
// the downsampling factor. Pixel values stay in [0,1]; normalized boxes are
// scale-invariant so the ground truth is untouched.
Tensor resize_and_normalize(const Tensor& image, int64_t target_size,
                            int64_t downsampling_factor);

// The only value normalization in the pipeline, applied at the network-input
// boundary: maps [0,1] pixels to [-1,1].
Tensor normalize_input(const Tensor& image);

}  // namespace ssldetr
