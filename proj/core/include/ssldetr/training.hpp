#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssldetr/config.hpp"
#include "ssldetr/data.hpp"
#include "ssldetr/detector.hpp"
#include "ssldetr/evaluation.hpp"
#include "ssldetr/matching.hpp"
#include "ssldetr/optimizer.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/ssl_tasks.hpp"

namespace ssldetr {

struct SSLWeightSchedule {
  enum class Mode { kConstant, kLinearDecay };
  double initial_weight = 1.0;
  Mode mode = Mode::kConstant;
  double final_weight = 0.0;
  int64_t total_steps = 0;  // linear decay only
};

// Constant mode returns initial_weight for any step >= 0. Linear decay
// interpolates initial -> final over [0, total_steps] and rejects steps
// outside that range.
double ssl_weight(const SSLWeightSchedule& schedule, int64_t step);

SSLWeightSchedule schedule_from(const SSLRunConfig& ssl, int64_t total_steps);

struct StepMetrics {
  double total_loss = 0.0;
  double detection_loss = 0.0;      // batch mean
  double ssl_loss = 0.0;            // batch mean, unweighted
  double ssl_weight = 0.0;
  double grad_norm = 0.0;           // pre-clip global gradient norm
  DetectionLossBreakdown detection; // batch means of the weighted components
};

// One optimizer update from the SSL loss alone. Only parameters on the SSL
// forward path (backbone, encoder, SSL head) are updated; the detection
// branch never enters the graph, so its parameters are bit-unchanged.
// Images are raw [0,1] pixels; input normalization happens inside.
StepMetrics pretrain_step(DetrModel& model, const std::vector<Tensor>& images,
                          const SSLTaskConfig& task, AdamW& optim,
                          double clip_norm, Rng& ssl_rng);

// One optimizer update from the detection loss on clean images.
StepMetrics detection_step(DetrModel& model, const std::vector<Tensor>& images,
                           const std::vector<GroundTruthSet>& gts, AdamW& optim,
                           double clip_norm);

// Two forward passes per image: detection on the clean image, SSL on the
// transformed one; total = detection + weight(step) * ssl, one update.
// When weight(step) == 0 the SSL branch is skipped entirely (no transform is
// sampled, ssl_rng is untouched), making the update bit-identical to
// detection_step. The logged total satisfies
// total_loss == detection_loss + ssl_weight * ssl_loss exactly.
StepMetrics multitask_step(DetrModel& model, const std::vector<Tensor>& images,
                           const std::vector<GroundTruthSet>& gts,
                           const SSLTaskConfig& task,
                           const SSLWeightSchedule& schedule, AdamW& optim,
                           double clip_norm, int64_t step, Rng& ssl_rng);

// Full-dataset COCO-protocol evaluation; boxes are reported in each image's
// original pixel space. Throws on an empty dataset or a class-count mismatch.
EvalReport evaluate_model(const DetrModel& model, const DetectionDataset& dataset,
                          int64_t num_workers = 1);

// Loads and resizes one batch of images to [0,1] tensors of the model's
// input size; num_workers > 1 parallelizes the pixel loading only, so the
// result is independent of the worker count.
std::vector<Tensor> load_batch(const DetectionDataset& dataset,
                               const std::vector<int64_t>& indices,
                               int64_t image_size, int64_t downsampling_factor,
                               int64_t num_workers);

struct RunManifest {
  std::string run_id;
  std::string command;  // pretrain | train | evaluate | visualize-ssl
  std::string status;   // running | completed | failed
  std::string revision;
  std::string started_at;
  std::string ended_at;
  uint64_t seed = 0;
  std::string config_json;  // canonical snapshot
  std::map<std::string, std::string> artifacts;  // name -> path within the run dir
  std::string init_checkpoint;                   // lineage
  int64_t init_loaded_tensors = 0;
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const std::string& text, const std::string& origin);
void write_manifest(const std::string& path, const RunManifest& manifest);
RunManifest read_manifest(const std::string& path);
std::string new_run_id(uint64_t seed);
std::string utc_timestamp();

struct ResolvedData {
  DetectionDataset train;
  DetectionDataset val;  // equals train when no separate split is configured
};

ResolvedData resolve_datasets(const RunConfig& config);

struct RunOptions {
  std::string output_dir;
  std::string init_checkpoint;  // overlapping warm start
  bool force = false;           // wipe an existing run directory
  int64_t num_workers = 1;
  std::string revision = "unknown";
};

struct RunResult {
  std::string run_dir;
  std::string manifest_path;
  std::string metrics_path;
  std::string checkpoint_path;
  int64_t epochs_run = 0;
  bool resumed = false;
  double final_total_loss = 0.0;
  EvalReport final_eval;  // meaningful for plain/multitask modes
};

// Drives a whole run: dataset resolution, model/optimizer construction,
// epoch loop with one JSON metrics record appended per epoch, a rolling
// checkpoint after every epoch, and a manifest. An interrupted run in the
// same directory with an identical config resumes at the recorded epoch;
// any other collision with an existing manifest is refused unless `force`.
RunResult run_training(const RunConfig& config, const RunOptions& options);

}  // namespace ssldetr
