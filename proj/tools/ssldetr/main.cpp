#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include <json.hpp>

#include "ssldetr/checkpoint.hpp"
#include "ssldetr/config.hpp"
#include "ssldetr/data.hpp"
#include "ssldetr/errors.hpp"
#include "ssldetr/image.hpp"
#include "ssldetr/training.hpp"
#include "viz.hpp"

#ifndef SSLDETR_REVISION
#define SSLDETR_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssldetr;

namespace {

int64_t env_workers() {
  const char* v = std::getenv("SSLDETR_NUM_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) {
    throw ConfigError("SSLDETR_NUM_WORKERS: expected a positive integer, got \"" +
                      std::string(v) + "\"");
  }
  return n;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const RangeError*>(&e)) return "range";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const ContractError*>(&e)) return "contract";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const InfeasibleError*>(&e)) return "infeasible";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

struct CommonFlags {
  std::string config_path;
  std::string mode;
  std::string ssl_task;
  double ssl_ratio = 0.5;
  std::string ssl_schedule;
  uint64_t seed = 0;
  int64_t epochs = 0;
  std::string init_path;
  std::string output_dir;
  bool force = false;
};

// Flags mirror config keys; a flag given on the command line overrides the
// file value.
void add_override_flags(CLI::App* cmd, CommonFlags& f, bool with_mode) {
  cmd->add_option("--config", f.config_path, "JSON run configuration");
  if (with_mode) {
    cmd->add_option("--mode", f.mode, "plain, multitask, or pretrain");
  }
  cmd->add_option("--ssl-task", f.ssl_task,
                  "reconstruction, mim_continuous, mim_discrete, "
                  "jigsaw_continuous, or jigsaw_discrete");
  cmd->add_option("--ssl-ratio", f.ssl_ratio, "fraction of patches transformed");
  cmd->add_option("--ssl-weight-schedule", f.ssl_schedule, "constant or linear");
  cmd->add_option("--seed", f.seed, "root random seed");
  cmd->add_option("--epochs", f.epochs, "training epochs");
}

bool flag_given(const CLI::App* cmd, const char* name) {
  const CLI::Option* option = cmd->get_option_no_throw(name);
  return option && option->count() > 0;
}

RunConfig make_config(const CLI::App* cmd, const CommonFlags& f) {
  RunConfig config =
      f.config_path.empty() ? default_run_config() : load_run_config(f.config_path);
  if (flag_given(cmd, "--mode")) config.mode = f.mode;
  if (flag_given(cmd, "--ssl-task")) config.ssl.task = ssl_task_from_string(f.ssl_task);
  if (flag_given(cmd, "--ssl-ratio")) config.ssl.ratio = f.ssl_ratio;
  if (flag_given(cmd, "--ssl-weight-schedule")) config.ssl.weight_schedule = f.ssl_schedule;
  if (flag_given(cmd, "--seed")) config.seed = f.seed;
  if (flag_given(cmd, "--epochs")) config.optim.epochs = f.epochs;
  return config;
}

void run_train_command(const CLI::App* cmd, CommonFlags& f, const char* forced_mode) {
  RunConfig config = make_config(cmd, f);
  if (forced_mode) config.mode = forced_mode;
  RunOptions options;
  options.output_dir = f.output_dir;
  options.init_checkpoint = f.init_path;
  options.force = f.force;
  options.num_workers = env_workers();
  options.revision = SSLDETR_REVISION;
  const RunResult result = run_training(config, options);

  json summary;
  summary["run_dir"] = result.run_dir;
  summary["mode"] = config.mode;
  summary["epochs_run"] = result.epochs_run;
  summary["resumed"] = result.resumed;
  summary["final_total_loss"] = result.final_total_loss;
  if (config.mode != "pretrain") {
    summary["final_eval"] = json::parse(eval_report_to_json(result.final_eval));
  }
  std::cout << summary.dump(2) << "\n";
}

// Reserves `dir` for this command's outputs: refuses to clobber a previous
// run's manifest unless forced.
void claim_output_dir(const fs::path& dir, bool force) {
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest) && !force) {
    throw IoError("output directory already contains a run; pass --force to "
                  "overwrite: " + manifest.string());
  }
  fs::create_directories(dir);
  std::error_code ec;
  fs::remove(manifest, ec);
}

RunManifest start_manifest(const std::string& command, const RunConfig& config) {
  RunManifest m;
  m.run_id = new_run_id(config.seed);
  m.command = command;
  m.status = "running";
  m.revision = SSLDETR_REVISION;
  m.started_at = utc_timestamp();
  m.seed = config.seed;
  m.config_json = run_config_to_json(config);
  return m;
}

// Builds the model a checkpoint was trained with (architecture from the
// checkpoint's embedded config when present, otherwise from `fallback`) and
// loads every tensor whose name and shape match.
DetrModel model_from_checkpoint(const CheckpointData& ck, const RunConfig& fallback) {
  RunConfig mcfg = fallback;
  json meta = json::parse(ck.meta_json, nullptr, false);
  if (!meta.is_discarded() && meta.is_object() && meta.contains("config")) {
    mcfg = parse_run_config(meta.at("config").dump(), "checkpoint config");
  }
  std::optional<SSLHeadConfig> head;
  if (mcfg.mode != "plain") head = SSLHeadConfig{mcfg.ssl.task, mcfg.ssl.vocab_size};
  Rng rng(derive_seed(mcfg.seed, 0));
  DetrModel model(mcfg.model, mcfg.backbone, head, rng);

  std::map<std::string, Tensor> compatible;
  for (const auto& [name, value] : ck.tensors) {
    if (name.rfind("optim.", 0) == 0) continue;
    Parameter* p = model.find_parameter(name);
    if (p && p->value.same_shape(value)) compatible.emplace(name, value);
  }
  const int64_t loaded = model.load_state(compatible, /*strict=*/false);
  if (loaded == 0) {
    throw ConfigError("checkpoint shares no tensors with the model it describes");
  }
  return model;
}

int run_evaluate(const CLI::App* cmd, CommonFlags& f, const std::string& ckpt_path,
                 const std::string& split) {
  RunConfig config = make_config(cmd, f);
  ResolvedData data = resolve_datasets(config);
  const DetectionDataset& dataset = split == "train" ? data.train : data.val;

  CheckpointData ck = load_checkpoint(ckpt_path);
  DetrModel model = model_from_checkpoint(ck, config);
  const EvalReport report = evaluate_model(model, dataset, env_workers());
  const std::string report_json = eval_report_to_json(report);
  std::cout << report_json << "\n";

  if (!f.output_dir.empty()) {
    const fs::path dir(f.output_dir);
    claim_output_dir(dir, f.force);
    RunManifest manifest = start_manifest("evaluate", config);
    manifest.init_checkpoint = ckpt_path;
    manifest.artifacts = {{"report", "eval.json"}};
    write_manifest((dir / "manifest.json").string(), manifest);
    std::ofstream out(dir / "eval.json", std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + (dir / "eval.json").string());
    out << report_json << "\n";
    manifest.status = "completed";
    manifest.ended_at = utc_timestamp();
    write_manifest((dir / "manifest.json").string(), manifest);
  }
  return 0;
}

int run_visualize(const CLI::App* cmd, CommonFlags& f, const std::string& ckpt_path,
                  const std::string& split, int64_t num_images) {
  RunConfig config = make_config(cmd, f);
  CheckpointData ck = load_checkpoint(ckpt_path);
  DetrModel model = model_from_checkpoint(ck, config);

  SSLTaskConfig task;
  task.kind = flag_given(cmd, "--ssl-task") ? ssl_task_from_string(f.ssl_task)
                                            : config.ssl.task;
  task.ratio = flag_given(cmd, "--ssl-ratio") ? f.ssl_ratio : config.ssl.ratio;
  if (task.kind == SSLTaskKind::MimDiscrete) {
    const int64_t vocab = model.ssl_head_config()
                              ? model.ssl_head_config()->vocab_size
                              : config.ssl.vocab_size;
    task.tokenizer = std::make_shared<MeanColorQuantizer>(vocab);
  }

  ResolvedData data = resolve_datasets(config);
  const DetectionDataset& dataset = split == "train" ? data.train : data.val;
  if (dataset.images.empty()) throw ConfigError("no images to visualize");

  const fs::path dir(f.output_dir);
  claim_output_dir(dir, f.force);
  RunManifest manifest = start_manifest("visualize-ssl", config);
  manifest.init_checkpoint = ckpt_path;
  write_manifest((dir / "manifest.json").string(), manifest);

  Rng rng(derive_seed(config.seed, 3));
  const int64_t n =
      std::min<int64_t>(num_images, static_cast<int64_t>(dataset.images.size()));
  for (int64_t i = 0; i < n; ++i) {
    const ImageRecord& rec = dataset.images[static_cast<size_t>(i)];
    const Tensor image =
        resize_and_normalize(load_pixels(rec), model.config().image_size,
                             model.backbone_config().downsampling_factor);
    const SSLPanels panels = render_ssl_panels(model, image, task, rng);
    const Tensor grid =
        hstack_panels({panels.original, panels.input, panels.prediction});
    const std::string name = "ssl_" + std::to_string(i) + ".png";
    write_image((dir / name).string(), grid);
    manifest.artifacts[name] = name;
  }
  manifest.status = "completed";
  manifest.ended_at = utc_timestamp();
  write_manifest((dir / "manifest.json").string(), manifest);
  std::cout << "wrote " << n << " panel grids to " << dir.string() << "\n";
  return 0;
}

int run_generate(const CLI::App* cmd, CommonFlags& f, int64_t num_images) {
  RunConfig config = make_config(cmd, f);
  if (cmd->count("--seed")) config.data.synthetic.seed = f.seed;
  if (num_images > 0) config.data.synthetic.num_images = num_images;

  const fs::path dir(f.output_dir);
  claim_output_dir(dir, f.force);
  RunManifest manifest = start_manifest("generate-data", config);
  write_manifest((dir / "manifest.json").string(), manifest);

  DetectionDataset dataset = generate_synthetic(config.data.synthetic);
  save_coco(dataset, (dir / "annotations.json").string(), (dir / "images").string());
  manifest.artifacts = {{"annotations", "annotations.json"}, {"images", "images"}};
  manifest.status = "completed";
  manifest.ended_at = utc_timestamp();
  write_manifest((dir / "manifest.json").string(), manifest);
  std::cout << "wrote " << dataset.images.size() << " images and annotations to "
            << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised pretext tasks and set-prediction training for a "
               "compact detection transformer"};
  app.require_subcommand(1);
  bool json_errors = false;
  app.add_flag("--json-errors", json_errors, "report failures as JSON on stdout");

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "Train a detector (plain, multitask, or pretrain mode)");
  train->fallthrough();
  add_override_flags(train, train_flags, /*with_mode=*/true);
  train->add_option("--init", train_flags.init_path, "checkpoint for a warm start");
  train->add_option("--output-dir", train_flags.output_dir, "run directory")->required();
  train->add_flag("--force", train_flags.force, "overwrite an existing run directory");

  CommonFlags pre_flags;
  CLI::App* pretrain = app.add_subcommand("pretrain", "SSL-only pre-training (labels not required)");
  pretrain->fallthrough();
  add_override_flags(pretrain, pre_flags, /*with_mode=*/false);
  pretrain->add_option("--init", pre_flags.init_path, "checkpoint for a warm start");
  pretrain->add_option("--output-dir", pre_flags.output_dir, "run directory")->required();
  pretrain->add_flag("--force", pre_flags.force, "overwrite an existing run directory");

  CommonFlags eval_flags;
  std::string eval_ckpt;
  std::string eval_split = "val";
  CLI::App* evaluate = app.add_subcommand("evaluate", "COCO-protocol evaluation of a checkpoint");
  evaluate->fallthrough();
  add_override_flags(evaluate, eval_flags, /*with_mode=*/false);
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  evaluate->add_option("--split", eval_split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  evaluate->add_option("--output-dir", eval_flags.output_dir, "where to write eval.json");
  evaluate->add_flag("--force", eval_flags.force, "overwrite an existing output directory");

  CommonFlags viz_flags;
  std::string viz_ckpt;
  std::string viz_split = "val";
  int64_t viz_images = 4;
  CLI::App* visualize = app.add_subcommand("visualize-ssl", "Render original / transformed / predicted panels");
  visualize->fallthrough();
  add_override_flags(visualize, viz_flags, /*with_mode=*/false);
  visualize->add_option("--checkpoint", viz_ckpt, "checkpoint with an SSL head")->required();
  visualize->add_option("--split", viz_split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  visualize->add_option("--images", viz_images, "number of images to render");
  visualize->add_option("--output-dir", viz_flags.output_dir, "where to write panels")->required();
  visualize->add_flag("--force", viz_flags.force, "overwrite an existing output directory");

  CommonFlags gen_flags;
  int64_t gen_images = 0;
  CLI::App* generate = app.add_subcommand("generate-data", "Write a synthetic shapes dataset in annotation-JSON format");
  generate->fallthrough();
  add_override_flags(generate, gen_flags, /*with_mode=*/false);
  generate->add_option("--num-images", gen_images, "dataset size");
  generate->add_option("--output-dir", gen_flags.output_dir, "dataset directory")->required();
  generate->add_flag("--force", gen_flags.force, "overwrite an existing dataset directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) run_train_command(train, train_flags, nullptr);
    if (pretrain->parsed()) run_train_command(pretrain, pre_flags, "pretrain");
    if (evaluate->parsed()) run_evaluate(evaluate, eval_flags, eval_ckpt, eval_split);
    if (visualize->parsed())
      run_visualize(visualize, viz_flags, viz_ckpt, viz_split, viz_images);
    if (generate->parsed()) run_generate(generate, gen_flags, gen_images);
  } catch (const std::exception& e) {
    if (json_errors) {
      json err;
      err["error"] = {{"type", error_kind(e)}, {"message", e.what()}};
      std::cout << err.dump() << "\n";
    } else {
      std::cerr << "error: " << e.what() << "\n";
    }
    return 1;
  }
  return 0;
}
