#include "ssldetr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ssldetr/checkpoint.hpp"
#include "ssldetr/errors.hpp"

namespace ssldetr {

namespace fs = std::filesystem;
using nlohmann::json;

double ssl_weight(const SSLWeightSchedule& schedule, int64_t step) {
  if (step < 0) {
    throw RangeError("ssl_weight: step " + std::to_string(step) + " is negative");
  }
  if (schedule.mode == SSLWeightSchedule::Mode::kConstant) {
    return schedule.initial_weight;
  }
  if (schedule.total_steps < 1) {
    throw RangeError("ssl_weight: linear decay needs total_steps >= 1");
  }
  if (step > schedule.total_steps) {
    throw RangeError("ssl_weight: step " + std::to_string(step) + " beyond total_steps " +
                     std::to_string(schedule.total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.initial_weight + (schedule.final_weight - schedule.initial_weight) * frac;
}

SSLWeightSchedule schedule_from(const SSLRunConfig& ssl, int64_t total_steps) {
  SSLWeightSchedule s;
  s.initial_weight = ssl.initial_weight;
  s.final_weight = ssl.final_weight;
  s.mode = ssl.weight_schedule == "linear" ? SSLWeightSchedule::Mode::kLinearDecay
                                           : SSLWeightSchedule::Mode::kConstant;
  s.total_steps = total_steps;
  return s;
}

namespace {

void require_head(const DetrModel& model, const SSLTaskConfig& task) {
  const auto& head = model.ssl_head_config();
  if (!head) {
    throw ContractError(std::string("model has no SSL head; cannot run task ") +
                        to_string(task.kind));
  }
  if (head->task != task.kind) {
    throw ContractError(std::string("SSL task ") + to_string(task.kind) +
                        " does not match the model head (" + to_string(head->task) + ")");
  }
  if (task.kind == SSLTaskKind::MimDiscrete && task.tokenizer &&
      task.tokenizer->vocabulary_size() != head->vocab_size) {
    throw ContractError("tokenizer vocabulary " +
                        std::to_string(task.tokenizer->vocabulary_size()) +
                        " does not match the model head (" +
                        std::to_string(head->vocab_size) + ")");
  }
}

ad::Var ssl_branch(ad::Tape& tape, const DetrModel& model, const Tensor& image01,
                   const SSLTaskConfig& task, Rng& rng) {
  const PatchGrid grid = model.grid_for(image01);
  const SSLSample sample = make_ssl_sample(image01, grid, task, rng);
  ad::Var features = model.backbone_forward(tape, normalize_input(sample.input_image));
  ad::Var tokens = model.encoder_forward(tape, features, grid);
  ad::Var prediction = model.ssl_head_forward(tape, tokens, grid, task.kind);
  return ssl_loss_var(tape, prediction, sample, grid);
}

ad::Var det_branch(ad::Tape& tape, const DetrModel& model, const Tensor& image01,
                   const GroundTruthSet& gt, DetectionLossBreakdown* breakdown) {
  DetrModel::Forward f = model.forward(tape, normalize_input(image01));
  DetectionSet snapshot{tape.value(f.class_logits), tape.value(f.boxes)};
  MatchResult match = hungarian_match(pairwise_cost(snapshot, gt));
  return detection_loss_var(tape, f.class_logits, f.boxes, gt, match, {}, breakdown);
}

void check_batch(const std::vector<Tensor>& images, const std::vector<GroundTruthSet>* gts,
                 const char* op) {
  if (images.empty()) {
    throw ContractError(std::string(op) + ": empty batch");
  }
  if (gts && gts->size() != images.size()) {
    throw ContractError(std::string(op) + ": one ground-truth set per image required (" +
                        std::to_string(images.size()) + " images, " +
                        std::to_string(gts->size()) + " annotations)");
  }
}

}  // namespace

StepMetrics pretrain_step(DetrModel& model, const std::vector<Tensor>& images,
                          const SSLTaskConfig& task, AdamW& optim, double clip_norm,
                          Rng& ssl_rng) {
  check_batch(images, nullptr, "pretrain_step");
  require_head(model, task);
  ad::Tape tape;
  ad::Var sum = ssl_branch(tape, model, images[0], task, ssl_rng);
  for (size_t i = 1; i < images.size(); ++i) {
    sum = tape.add(sum, ssl_branch(tape, model, images[i], task, ssl_rng));
  }
  ad::Var mean = tape.scale(sum, 1.0 / static_cast<double>(images.size()));
  tape.backward(mean);

  StepMetrics m;
  m.ssl_loss = tape.value(mean).scalar();
  m.total_loss = m.ssl_loss;
  m.ssl_weight = 1.0;
  m.grad_norm = optim.step(tape.touched_params(), clip_norm);
  return m;
}

StepMetrics detection_step(DetrModel& model, const std::vector<Tensor>& images,
                           const std::vector<GroundTruthSet>& gts, AdamW& optim,
                           double clip_norm) {
  check_batch(images, &gts, "detection_step");
  const double inv = 1.0 / static_cast<double>(images.size());
  ad::Tape tape;
  DetectionLossBreakdown acc;
  ad::Var sum;
  for (size_t i = 0; i < images.size(); ++i) {
    DetectionLossBreakdown bd;
    ad::Var li = det_branch(tape, model, images[i], gts[i], &bd);
    acc.total += bd.total;
    acc.cls += bd.cls;
    acc.l1 += bd.l1;
    acc.giou += bd.giou;
    sum = i == 0 ? li : tape.add(sum, li);
  }
  ad::Var mean = tape.scale(sum, inv);
  tape.backward(mean);

  StepMetrics m;
  m.detection_loss = tape.value(mean).scalar();
  m.total_loss = m.detection_loss;
  m.detection = {acc.total * inv, acc.cls * inv, acc.l1 * inv, acc.giou * inv};
  m.grad_norm = optim.step(tape.touched_params(), clip_norm);
  return m;
}

StepMetrics multitask_step(DetrModel& model, const std::vector<Tensor>& images,
                           const std::vector<GroundTruthSet>& gts,
                           const SSLTaskConfig& task, const SSLWeightSchedule& schedule,
                           AdamW& optim, double clip_norm, int64_t step, Rng& ssl_rng) {
  check_batch(images, &gts, "multitask_step");
  const double weight = ssl_weight(schedule, step);
  if (weight == 0.0) {
    // Skipping the SSL branch entirely (including its rng draws) makes this
    // update bit-identical to a plain detection step.
    StepMetrics m = detection_step(model, images, gts, optim, clip_norm);
    m.ssl_weight = 0.0;
    return m;
  }
  require_head(model, task);

  const double inv = 1.0 / static_cast<double>(images.size());
  ad::Tape tape;
  DetectionLossBreakdown acc;
  ad::Var det_sum;
  ad::Var ssl_sum;
  for (size_t i = 0; i < images.size(); ++i) {
    DetectionLossBreakdown bd;
    ad::Var di = det_branch(tape, model, images[i], gts[i], &bd);
    acc.total += bd.total;
    acc.cls += bd.cls;
    acc.l1 += bd.l1;
    acc.giou += bd.giou;
    ad::Var si = ssl_branch(tape, model, images[i], task, ssl_rng);
    det_sum = i == 0 ? di : tape.add(det_sum, di);
    ssl_sum = i == 0 ? si : tape.add(ssl_sum, si);
  }
  ad::Var det_mean = tape.scale(det_sum, inv);
  ad::Var ssl_mean = tape.scale(ssl_sum, inv);
  // total = det + weight * ssl, composed so the logged components add back
  // to the logged total bit-exactly.
  ad::Var total = tape.add(det_mean, tape.scale(ssl_mean, weight));
  tape.backward(total);

  StepMetrics m;
  m.total_loss = tape.value(total).scalar();
  m.detection_loss = tape.value(det_mean).scalar();
  m.ssl_loss = tape.value(ssl_mean).scalar();
  m.ssl_weight = weight;
  m.detection = {acc.total * inv, acc.cls * inv, acc.l1 * inv, acc.giou * inv};
  m.grad_norm = optim.step(tape.touched_params(), clip_norm);
  return m;
}

std::vector<Tensor> load_batch(const DetectionDataset& dataset,
                               const std::vector<int64_t>& indices, int64_t image_size,
                               int64_t downsampling_factor, int64_t num_workers) {
  std::vector<Tensor> out(indices.size());
  auto work = [&](size_t lo, size_t hi) {
    for (size_t k = lo; k < hi; ++k) {
      const ImageRecord& rec = dataset.images.at(static_cast<size_t>(indices[k]));
      out[k] = resize_and_normalize(load_pixels(rec), image_size, downsampling_factor);
    }
  };
  const size_t n = indices.size();
  const size_t workers =
      num_workers < 2 ? 1 : std::min(static_cast<size_t>(num_workers), n);
  if (workers <= 1) {
    work(0, n);
    return out;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  const size_t chunk = (n + workers - 1) / workers;
  for (size_t t = 0; t < workers; ++t) {
    const size_t lo = t * chunk;
    const size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, t, lo, hi] {
      try {
        work(lo, hi);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

EvalReport evaluate_model(const DetrModel& model, const DetectionDataset& dataset,
                          int64_t num_workers) {
  if (dataset.images.empty()) {
    throw ConfigError("evaluation dataset is empty");
  }
  if (!dataset.has_annotations()) {
    throw ConfigError("evaluation dataset has no annotations");
  }
  const int64_t num_classes = model.config().num_classes;
  if (dataset.num_classes() > 0 && dataset.num_classes() != num_classes) {
    throw ConfigError("class-count mismatch: model predicts " +
                      std::to_string(num_classes) + " classes, dataset defines " +
                      std::to_string(dataset.num_classes()));
  }

  std::vector<EvalAnnotation> annotations = eval_annotations(dataset);
  std::vector<EvalDetection> detections;
  const int64_t n = static_cast<int64_t>(dataset.images.size());
  const int64_t block = 16;
  for (int64_t start = 0; start < n; start += block) {
    const int64_t stop = std::min(n, start + block);
    std::vector<int64_t> indices(static_cast<size_t>(stop - start));
    std::iota(indices.begin(), indices.end(), start);
    std::vector<Tensor> images =
        load_batch(dataset, indices, model.config().image_size,
                   model.backbone_config().downsampling_factor, num_workers);
    for (size_t k = 0; k < indices.size(); ++k) {
      const ImageRecord& rec = dataset.images[static_cast<size_t>(indices[k])];
      DetectionSet det = model.predict(normalize_input(images[k]));
      std::vector<EvalDetection> d = detections_from(det, rec.id, rec.width, rec.height);
      detections.insert(detections.end(), d.begin(), d.end());
    }
  }
  return compute_coco_map(detections, annotations, num_classes);
}

std::string manifest_to_json(const RunManifest& m) {
  json j;
  j["run_id"] = m.run_id;
  j["command"] = m.command;
  j["status"] = m.status;
  j["revision"] = m.revision;
  j["started_at"] = m.started_at;
  j["ended_at"] = m.ended_at;
  j["seed"] = m.seed;
  j["config"] = json::parse(m.config_json.empty() ? "{}" : m.config_json);
  j["artifacts"] = m.artifacts;
  j["lineage"] = {{"init_checkpoint", m.init_checkpoint},
                  {"loaded_tensors", m.init_loaded_tensors}};
  return j.dump(2);
}

RunManifest manifest_from_json(const std::string& text, const std::string& origin) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw IoError("not a valid manifest: " + origin);
  }
  RunManifest m;
  try {
    m.run_id = j.at("run_id").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.revision = j.value("revision", std::string());
    m.started_at = j.value("started_at", std::string());
    m.ended_at = j.value("ended_at", std::string());
    m.seed = j.value("seed", uint64_t{0});
    m.config_json = j.contains("config") ? j.at("config").dump() : "{}";
    if (j.contains("artifacts")) {
      for (auto it = j.at("artifacts").begin(); it != j.at("artifacts").end(); ++it) {
        m.artifacts[it.key()] = it.value().get<std::string>();
      }
    }
    if (j.contains("lineage")) {
      const json& l = j.at("lineage");
      m.init_checkpoint = l.value("init_checkpoint", std::string());
      m.init_loaded_tensors = l.value("loaded_tensors", int64_t{0});
    }
  } catch (const json::exception& e) {
    throw IoError("not a valid manifest: " + origin + ": " + e.what());
  }
  return m;
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << manifest_to_json(manifest) << "\n";
    if (!out) throw IoError("cannot write manifest: " + path);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot write manifest: " + path + ": " + ec.message());
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str(), path);
}

std::string new_run_id(uint64_t seed) {
  const uint64_t now = static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(derive_seed(now, seed)));
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ResolvedData resolve_datasets(const RunConfig& config) {
  ResolvedData out;
  const DataRunConfig& d = config.data;
  if (d.kind == "synthetic") {
    out.train = generate_synthetic(d.synthetic);
    if (d.synthetic_val_images > 0) {
      SyntheticConfig val = d.synthetic;
      val.num_images = d.synthetic_val_images;
      val.seed = derive_seed(d.synthetic.seed, 1);
      out.val = generate_synthetic(val);
    } else {
      out.val = out.train;
    }
  } else if (d.kind == "coco") {
    out.train = load_coco(d.train_annotations, d.image_root);
    out.val = d.val_annotations.empty() ? out.train
                                        : load_coco(d.val_annotations, d.image_root);
  } else if (d.kind == "folder") {
    out.train = load_image_folder(d.folder);
  } else {
    throw ConfigError("data.kind: unknown kind \"" + d.kind + "\"");
  }
  return out;
}

namespace {

// Loads every checkpoint tensor whose name (after an optional prefix filter)
// and shape match a model parameter; mismatches are skipped, not errors.
int64_t apply_overlapping(DetrModel& model, const std::map<std::string, Tensor>& tensors,
                          const std::string& prefix) {
  std::map<std::string, Tensor> compatible;
  for (const auto& [name, value] : tensors) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    Parameter* p = model.find_parameter(name);
    if (p && p->value.same_shape(value)) compatible.emplace(name, value);
  }
  return model.load_state(compatible, /*strict=*/false);
}

void truncate_jsonl(const std::string& path, int64_t keep_lines) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    std::string line;
    while (static_cast<int64_t>(lines.size()) < keep_lines && std::getline(in, line)) {
      lines.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot rewrite metrics log: " + path);
  for (const std::string& line : lines) out << line << "\n";
}

json metrics_row(int64_t epoch, int64_t global_step, const std::string& mode,
                 const StepMetrics& mean, int64_t steps) {
  json row;
  row["epoch"] = epoch;
  row["global_step"] = global_step;
  row["mode"] = mode;
  row["steps"] = steps;
  row["total_loss"] = mean.total_loss;
  row["detection_loss"] = mean.detection_loss;
  row["ssl_loss"] = mean.ssl_loss;
  row["ssl_weight"] = mean.ssl_weight;
  row["grad_norm"] = mean.grad_norm;
  row["loss_cls"] = mean.detection.cls;
  row["loss_l1"] = mean.detection.l1;
  row["loss_giou"] = mean.detection.giou;
  return row;
}

}  // namespace

RunResult run_training(const RunConfig& config_in, const RunOptions& options) {
  RunConfig config = config_in;
  validate_run_config(config);
  if (options.output_dir.empty()) {
    throw ConfigError("output_dir: required");
  }

  const fs::path run_dir(options.output_dir);
  const fs::path manifest_path = run_dir / "manifest.json";
  const fs::path metrics_path = run_dir / "metrics.jsonl";
  const fs::path config_path = run_dir / "config.json";
  const fs::path ckpt_dir = run_dir / "checkpoints";
  const fs::path ckpt_path = ckpt_dir / "last.ckpt";

  ResolvedData data = resolve_datasets(config);
  const bool pretrain = config.mode == "pretrain";
  if (data.train.images.empty()) {
    throw ConfigError("data: training dataset is empty");
  }
  if (!pretrain && !data.train.has_annotations()) {
    throw ConfigError("data: mode " + config.mode + " requires annotations");
  }
  if (config.model.num_classes == 0) {
    config.model.num_classes = data.train.num_classes();
  } else if (data.train.num_classes() > 0 &&
             config.model.num_classes != data.train.num_classes()) {
    throw ConfigError("model.num_classes: config says " +
                      std::to_string(config.model.num_classes) +
                      " but the dataset defines " +
                      std::to_string(data.train.num_classes()));
  }
  if (!pretrain && config.model.num_classes < 1) {
    throw ConfigError("model.num_classes: dataset defines no classes");
  }
  const std::string canonical = run_config_to_json(config);

  bool resume = false;
  if (fs::exists(manifest_path)) {
    if (options.force) {
      std::error_code ec;
      fs::remove(manifest_path, ec);
      fs::remove(metrics_path, ec);
      fs::remove(config_path, ec);
      fs::remove_all(ckpt_dir, ec);
    } else {
      RunManifest old = read_manifest(manifest_path.string());
      const bool same_config = json::parse(old.config_json, nullptr, false) ==
                               json::parse(canonical);
      if (old.status == "running" && same_config) {
        resume = fs::exists(ckpt_path);
      } else {
        throw IoError("output directory already contains a run (status \"" +
                      old.status + "\"); pass --force to overwrite: " +
                      manifest_path.string());
      }
    }
  }
  fs::create_directories(ckpt_dir);

  Rng rng_model(derive_seed(config.seed, 0));
  Rng rng_data(derive_seed(config.seed, 1));
  Rng rng_ssl(derive_seed(config.seed, 2));

  std::optional<SSLHeadConfig> head;
  if (config.mode != "plain") {
    head = SSLHeadConfig{config.ssl.task, config.ssl.vocab_size};
  }
  DetrModel model(config.model, config.backbone, head, rng_model);

  int64_t init_count = 0;
  if (!config.backbone.pretrained_weights.empty()) {
    CheckpointData ck = load_checkpoint(config.backbone.pretrained_weights);
    init_count += apply_overlapping(model, ck.tensors, "backbone.");
  }
  if (!options.init_checkpoint.empty()) {
    CheckpointData ck = load_checkpoint(options.init_checkpoint);
    init_count += apply_overlapping(model, ck.tensors, "");
  }

  AdamW optim(config.optim.learning_rate, config.optim.weight_decay);
  SSLTaskConfig task{config.ssl.task, config.ssl.ratio, nullptr};
  if (config.ssl.task == SSLTaskKind::MimDiscrete) {
    task.tokenizer = std::make_shared<MeanColorQuantizer>(config.ssl.vocab_size);
  }

  const int64_t n_train = static_cast<int64_t>(data.train.images.size());
  const int64_t batch = std::min(config.optim.batch_size, n_train);
  const int64_t steps_per_epoch = (n_train + batch - 1) / batch;
  const int64_t total_steps = config.optim.epochs * steps_per_epoch;
  const SSLWeightSchedule schedule = schedule_from(config.ssl, total_steps);

  RunManifest manifest;
  int64_t start_epoch = 0;
  int64_t global_step = 0;
  if (resume) {
    CheckpointData ck = load_checkpoint(ckpt_path.string());
    json meta = json::parse(ck.meta_json, nullptr, false);
    if (meta.is_discarded() || !meta.contains("epochs_completed")) {
      throw IoError("checkpoint is not a training checkpoint: " + ckpt_path.string());
    }
    start_epoch = meta.at("epochs_completed").get<int64_t>();
    global_step = meta.at("global_step").get<int64_t>();
    std::map<std::string, Tensor> model_state;
    std::map<std::string, Tensor> optim_state;
    for (const auto& [name, value] : ck.tensors) {
      (name.rfind("optim.", 0) == 0 ? optim_state : model_state).emplace(name, value);
    }
    model.load_state(model_state, /*strict=*/true);
    optim.load_state(optim_state, meta.at("optim_steps").get<int64_t>());
    rng_data.load_state(meta.at("rng_data").get<std::string>());
    rng_ssl.load_state(meta.at("rng_ssl").get<std::string>());
    truncate_jsonl(metrics_path.string(), start_epoch);
    manifest = read_manifest(manifest_path.string());
    manifest.status = "running";
    write_manifest(manifest_path.string(), manifest);
  } else {
    {
      std::ofstream metrics(metrics_path, std::ios::trunc);
      if (!metrics) throw IoError("cannot write metrics log: " + metrics_path.string());
    }
    {
      std::ofstream cfg(config_path, std::ios::trunc);
      if (!cfg) throw IoError("cannot write config snapshot: " + config_path.string());
      cfg << canonical << "\n";
    }
    manifest.run_id = new_run_id(config.seed);
    manifest.command = pretrain ? "pretrain" : "train";
    manifest.status = "running";
    manifest.revision = options.revision;
    manifest.started_at = utc_timestamp();
    manifest.seed = config.seed;
    manifest.config_json = canonical;
    manifest.artifacts = {{"config", "config.json"},
                          {"metrics", "metrics.jsonl"},
                          {"checkpoint", "checkpoints/last.ckpt"}};
    manifest.init_checkpoint = options.init_checkpoint;
    manifest.init_loaded_tensors = init_count;
    write_manifest(manifest_path.string(), manifest);
  }

  RunResult result;
  result.run_dir = run_dir.string();
  result.manifest_path = manifest_path.string();
  result.metrics_path = metrics_path.string();
  result.checkpoint_path = ckpt_path.string();
  result.resumed = resume;

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot append to metrics log: " + metrics_path.string());

  std::vector<int64_t> order(static_cast<size_t>(n_train));

  for (int64_t epoch = start_epoch; epoch < config.optim.epochs; ++epoch) {
    // Shuffle a fresh identity order each epoch so a resumed run replays the
    // same batches as an uninterrupted one.
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n_train - 1; i > 0; --i) {
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng_data.uniform_int(0, i))]);
    }

    StepMetrics acc;
    DetectionLossBreakdown bd_acc;
    int64_t steps = 0;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const int64_t lo = s * batch;
      const int64_t hi = std::min(n_train, lo + batch);
      std::vector<int64_t> indices(order.begin() + lo, order.begin() + hi);
      std::vector<Tensor> images =
          load_batch(data.train, indices, config.model.image_size,
                     config.backbone.downsampling_factor, options.num_workers);
      StepMetrics m;
      if (pretrain) {
        m = pretrain_step(model, images, task, optim, config.optim.grad_clip_norm,
                          rng_ssl);
      } else {
        std::vector<GroundTruthSet> gts;
        gts.reserve(indices.size());
        for (int64_t idx : indices) {
          gts.push_back(data.train.images[static_cast<size_t>(idx)].gt);
        }
        if (config.mode == "multitask") {
          m = multitask_step(model, images, gts, task, schedule, optim,
                             config.optim.grad_clip_norm, global_step, rng_ssl);
        } else {
          m = detection_step(model, images, gts, optim, config.optim.grad_clip_norm);
        }
      }
      acc.total_loss += m.total_loss;
      acc.detection_loss += m.detection_loss;
      acc.ssl_loss += m.ssl_loss;
      acc.ssl_weight += m.ssl_weight;
      acc.grad_norm += m.grad_norm;
      bd_acc.cls += m.detection.cls;
      bd_acc.l1 += m.detection.l1;
      bd_acc.giou += m.detection.giou;
      ++global_step;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    StepMetrics mean;
    mean.total_loss = acc.total_loss * inv;
    mean.detection_loss = acc.detection_loss * inv;
    mean.ssl_loss = acc.ssl_loss * inv;
    mean.ssl_weight = acc.ssl_weight * inv;
    mean.grad_norm = acc.grad_norm * inv;
    mean.detection = {0.0, bd_acc.cls * inv, bd_acc.l1 * inv, bd_acc.giou * inv};

    json row = metrics_row(epoch, global_step, config.mode, mean, steps);
    if (!pretrain) {
      result.final_eval = evaluate_model(model, data.val, options.num_workers);
      row["eval"] = json::parse(eval_report_to_json(result.final_eval));
    }
    metrics << row.dump() << "\n";
    metrics.flush();
    if (!metrics) throw IoError("cannot append to metrics log: " + metrics_path.string());

    CheckpointData ck;
    ck.tensors = model.state();
    for (const auto& [name, value] : optim.state()) ck.tensors.emplace(name, value);
    json meta;
    meta["kind"] = "training_run";
    meta["mode"] = config.mode;
    meta["epochs_completed"] = epoch + 1;
    meta["global_step"] = global_step;
    meta["optim_steps"] = optim.steps_taken();
    meta["rng_data"] = rng_data.save_state();
    meta["rng_ssl"] = rng_ssl.save_state();
    meta["config"] = json::parse(canonical);
    ck.meta_json = meta.dump();
    save_checkpoint(ckpt_path.string(), ck);

    result.final_total_loss = mean.total_loss;
    ++result.epochs_run;
  }

  manifest.status = "completed";
  manifest.ended_at = utc_timestamp();
  write_manifest(manifest_path.string(), manifest);
  return result;
}

}  // namespace ssldetr
