#pragma once

#include <cstdint>
#include <string>

#include "ssldetr/data.hpp"
#include "ssldetr/detector.hpp"
#include "ssldetr/optimizer.hpp"
#include "ssldetr/ssl_tasks.hpp"

namespace ssldetr {

struct SSLRunConfig {
  SSLTaskKind task = SSLTaskKind::MimContinuous;
  double ratio = 0.5;
  std::string weight_schedule = "constant";  // "constant" | "linear"
  double initial_weight = 1.0;
  double final_weight = 0.0;  // linear decay target
  int64_t vocab_size = 512;   // MimDiscrete tokenizer vocabulary
};

struct DataRunConfig {
  std::string kind = "synthetic";  // "synthetic" | "coco" | "folder"
  std::string train_annotations;
  std::string val_annotations;
  std::string image_root;
  std::string folder;  // unlabeled images for pre-training
  SyntheticConfig synthetic;
  int64_t synthetic_val_images = 100;
};

// Versioned run configuration. The JSON schema mirrors this structure
// one-to-one; unknown keys are rejected with their field path.
struct RunConfig {
  int64_t config_version = 1;
  uint64_t seed = 0;
  std::string mode = "plain";  // "plain" | "multitask" | "pretrain"
  DetectorConfig model;
  BackboneConfig backbone;
  OptimConfig optim;
  SSLRunConfig ssl;
  DataRunConfig data;
};

RunConfig default_run_config();

// Parses and validates; errors carry the offending field path.
RunConfig parse_run_config(const std::string& json_text, const std::string& origin);
RunConfig load_run_config(const std::string& path);
void validate_run_config(const RunConfig& config);

// Canonical JSON snapshot (stable key order) for manifests and checkpoints.
std::string run_config_to_json(const RunConfig& config);

}  // namespace ssldetr
