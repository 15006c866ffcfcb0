#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "ssldetr/checkpoint.hpp"
#include "ssldetr/data.hpp"
#include "ssldetr/image.hpp"

#ifndef SSLDETR_CLI_PATH
#error "SSLDETR_CLI_PATH must point at the command-line binary"
#endif

using namespace ssldetr;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const std::string tag = std::to_string(++counter);
  const std::string out_path =
      (std::filesystem::temp_directory_path() / ("ssldetr_cli_out_" + tag)).string();
  const std::string err_path =
      (std::filesystem::temp_directory_path() / ("ssldetr_cli_err_" + tag)).string();
  std::string cmd = env;
  if (!cmd.empty()) cmd += " ";
  cmd += "\"" SSLDETR_CLI_PATH "\" " + args + " > \"" + out_path + "\" 2> \"" +
         err_path + "\"";
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = testutil::read_file(out_path);
  r.err = testutil::read_file(err_path);
  std::filesystem::remove(out_path);
  std::filesystem::remove(err_path);
  return r;
}

json base_config() {
  json c;
  c["config_version"] = 1;
  c["seed"] = 11;
  c["mode"] = "plain";
  c["model"] = {{"num_queries", 4},    {"num_classes", 0},
                {"encoder_layers", 1}, {"decoder_layers", 1},
                {"attention_heads", 2}, {"hidden_dim", 16},
                {"ffn_dim", 32},       {"image_size", 32}};
  c["backbone"] = {{"downsampling_factor", 8}, {"feature_dim", 12}, {"kind", "conv"}};
  c["optim"] = {{"learning_rate", 1e-3},
                {"weight_decay", 0.0},
                {"batch_size", 4},
                {"grad_clip_norm", 0.0},
                {"epochs", 2}};
  c["ssl"] = {{"task", "mim_continuous"}, {"ratio", 0.5},
              {"weight_schedule", "constant"}, {"initial_weight", 0.5},
              {"final_weight", 0.0}, {"vocab_size", 64}};
  c["data"] = {{"kind", "synthetic"},
               {"synthetic",
                {{"num_images", 8},
                 {"image_size", 32},
                 {"min_objects", 1},
                 {"max_objects", 2},
                 {"min_size", 8},
                 {"max_size", 14},
                 {"seed", 21}}},
               {"synthetic_val_images", 4}};
  return c;
}

std::string write_config(const testutil::TempDir& dir, const std::string& name,
                         const json& config) {
  const std::string path = dir.file(name);
  std::ofstream out(path);
  out << config.dump(2) << "\n";
  return path;
}

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("training produces a run directory and a summary") {
  testutil::TempDir dir("cli_train");
  const std::string cfg = write_config(dir, "run.json", base_config());
  const std::string run_dir = dir.str() + "/run";

  CliResult r = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                        quoted(run_dir));
  REQUIRE(r.exit_code == 0);
  json summary = json::parse(r.out);
  CHECK(summary.at("mode") == "plain");
  CHECK(summary.at("epochs_run").get<int64_t>() == 2);
  CHECK(summary.at("resumed").get<bool>() == false);
  CHECK(summary.at("final_eval").contains("ap50"));

  CHECK(std::filesystem::exists(run_dir + "/manifest.json"));
  CHECK(std::filesystem::exists(run_dir + "/metrics.jsonl"));
  CHECK(std::filesystem::exists(run_dir + "/config.json"));
  CHECK(std::filesystem::exists(run_dir + "/checkpoints/last.ckpt"));

  json manifest = json::parse(testutil::read_file(run_dir + "/manifest.json"));
  CHECK(manifest.at("status") == "completed");
  CHECK(manifest.at("command") == "train");
  CHECK(manifest.at("config").at("model").at("num_classes").get<int64_t>() == 3);
}

TEST_CASE("command-line flags override the configuration file") {
  testutil::TempDir dir("cli_flags");
  const std::string cfg = write_config(dir, "run.json", base_config());
  const std::string run_dir = dir.str() + "/run";

  CliResult r = run_cli("train --config " + quoted(cfg) +
                        " --mode multitask --ssl-task jigsaw_continuous"
                        " --ssl-ratio 0.25 --ssl-weight-schedule linear"
                        " --seed 5 --epochs 1 --output-dir " +
                        quoted(run_dir));
  REQUIRE(r.exit_code == 0);
  json snapshot = json::parse(testutil::read_file(run_dir + "/config.json"));
  CHECK(snapshot.at("mode") == "multitask");
  CHECK(snapshot.at("ssl").at("task") == "jigsaw_continuous");
  CHECK(snapshot.at("ssl").at("ratio").get<double>() == 0.25);
  CHECK(snapshot.at("ssl").at("weight_schedule") == "linear");
  CHECK(snapshot.at("seed").get<uint64_t>() == 5);
  CHECK(snapshot.at("optim").at("epochs").get<int64_t>() == 1);

  json row = json::parse(testutil::read_file(run_dir + "/metrics.jsonl"));
  CHECK(row.at("mode") == "multitask");
  CHECK(row.at("ssl_loss").get<double>() > 0.0);
}

TEST_CASE("the same seed reproduces the metrics log byte for byte") {
  testutil::TempDir dir("cli_repro");
  const std::string cfg = write_config(dir, "run.json", base_config());
  CliResult a = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                        quoted(dir.str() + "/a"));
  CliResult b = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                        quoted(dir.str() + "/b"));
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  const std::string la = testutil::read_file(dir.str() + "/a/metrics.jsonl");
  const std::string lb = testutil::read_file(dir.str() + "/b/metrics.jsonl");
  CHECK(la == lb);
  CHECK_FALSE(la.empty());
}

TEST_CASE("the worker count never changes the numbers") {
  testutil::TempDir dir("cli_workers");
  const std::string cfg = write_config(dir, "run.json", base_config());
  CliResult one = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                              quoted(dir.str() + "/w1"),
                          "SSLDETR_NUM_WORKERS=1");
  CliResult three = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                                quoted(dir.str() + "/w3"),
                            "SSLDETR_NUM_WORKERS=3");
  REQUIRE(one.exit_code == 0);
  REQUIRE(three.exit_code == 0);
  CHECK(testutil::read_file(dir.str() + "/w1/metrics.jsonl") ==
        testutil::read_file(dir.str() + "/w3/metrics.jsonl"));

  CliResult bad = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                              quoted(dir.str() + "/bad"),
                          "SSLDETR_NUM_WORKERS=abc");
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.find("SSLDETR_NUM_WORKERS") != std::string::npos);
}

TEST_CASE("an existing run is refused until forced") {
  testutil::TempDir dir("cli_force");
  json cfg_json = base_config();
  cfg_json["optim"]["epochs"] = 1;
  const std::string cfg = write_config(dir, "run.json", cfg_json);
  const std::string run_dir = dir.str() + "/run";

  REQUIRE(run_cli("train --config " + quoted(cfg) + " --output-dir " +
                  quoted(run_dir))
              .exit_code == 0);
  CliResult again = run_cli("train --config " + quoted(cfg) + " --output-dir " +
                            quoted(run_dir));
  CHECK(again.exit_code == 1);
  CHECK(again.err.find("--force") != std::string::npos);

  CliResult forced = run_cli("train --config " + quoted(cfg) + " --seed 12" +
                             " --output-dir " + quoted(run_dir) + " --force");
  CHECK(forced.exit_code == 0);
  json manifest = json::parse(testutil::read_file(run_dir + "/manifest.json"));
  CHECK(manifest.at("seed").get<uint64_t>() == 12);
}

TEST_CASE("an interrupted run resumes into the uninterrupted trajectory") {
  testutil::TempDir dir("cli_resume");
  json three = base_config();
  three["optim"]["epochs"] = 3;
  const std::string cfg3 = write_config(dir, "three.json", three);
  const std::string ref_dir = dir.str() + "/ref";
  const std::string twin_dir = dir.str() + "/twin";

  REQUIRE(run_cli("train --config " + quoted(cfg3) + " --output-dir " +
                  quoted(ref_dir))
              .exit_code == 0);
  REQUIRE(run_cli("train --config " + quoted(cfg3) + " --epochs 1 --output-dir " +
                  quoted(twin_dir))
              .exit_code == 0);

  // put the twin into the state a mid-run abort leaves behind
  json manifest = json::parse(testutil::read_file(twin_dir + "/manifest.json"));
  manifest["status"] = "running";
  manifest["config"] = json::parse(testutil::read_file(ref_dir + "/config.json"));
  std::ofstream(twin_dir + "/manifest.json") << manifest.dump(2) << "\n";

  CliResult resumed = run_cli("train --config " + quoted(cfg3) + " --output-dir " +
                              quoted(twin_dir));
  REQUIRE(resumed.exit_code == 0);
  json summary = json::parse(resumed.out);
  CHECK(summary.at("resumed").get<bool>() == true);
  CHECK(summary.at("epochs_run").get<int64_t>() == 2);

  CHECK(testutil::read_file(ref_dir + "/metrics.jsonl") ==
        testutil::read_file(twin_dir + "/metrics.jsonl"));
}

TEST_CASE("pretraining runs on an unlabeled image folder") {
  testutil::TempDir dir("cli_pretrain");
  SyntheticConfig gen;
  gen.num_images = 6;
  gen.image_size = 32;
  gen.min_size = 8;
  gen.max_size = 14;
  gen.seed = 77;
  DetectionDataset tiny = generate_synthetic(gen);
  save_coco(tiny, dir.file("ann.json"), dir.str() + "/images");

  json cfg_json = base_config();
  cfg_json["mode"] = "pretrain";
  cfg_json["model"]["num_classes"] = 3;  // a folder defines none to infer
  cfg_json["data"]["kind"] = "folder";
  cfg_json["data"]["folder"] = dir.str() + "/images";
  const std::string cfg = write_config(dir, "pre.json", cfg_json);
  const std::string run_dir = dir.str() + "/run";

  CliResult r = run_cli("pretrain --config " + quoted(cfg) + " --output-dir " +
                        quoted(run_dir));
  REQUIRE(r.exit_code == 0);
  json summary = json::parse(r.out);
  CHECK(summary.at("mode") == "pretrain");
  CHECK_FALSE(summary.contains("final_eval"));

  std::ifstream metrics(run_dir + "/metrics.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(metrics, line)) {
    json row = json::parse(line);
    CHECK(row.at("mode") == "pretrain");
    CHECK(row.at("ssl_loss").get<double>() > 0.0);
    CHECK(row.at("ssl_weight").get<double>() == 1.0);
    CHECK_FALSE(row.contains("eval"));
    ++rows;
  }
  CHECK(rows == 2);
}

TEST_CASE("evaluation prints a report and archives it on request") {
  testutil::TempDir dir("cli_eval");
  json cfg_json = base_config();
  cfg_json["optim"]["epochs"] = 1;
  const std::string cfg = write_config(dir, "run.json", cfg_json);
  const std::string run_dir = dir.str() + "/run";
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --output-dir " +
                  quoted(run_dir))
              .exit_code == 0);
  const std::string ckpt = run_dir + "/checkpoints/last.ckpt";

  CliResult bare = run_cli("evaluate --config " + quoted(cfg) + " --checkpoint " +
                           quoted(ckpt));
  REQUIRE(bare.exit_code == 0);
  json report = json::parse(bare.out);
  CHECK(report.contains("ap"));
  CHECK(report.contains("ap_per_threshold"));

  const std::string eval_dir = dir.str() + "/eval";
  CliResult archived = run_cli("evaluate --config " + quoted(cfg) +
                               " --checkpoint " + quoted(ckpt) + " --split val" +
                               " --output-dir " + quoted(eval_dir));
  REQUIRE(archived.exit_code == 0);
  json archived_report =
      json::parse(testutil::read_file(eval_dir + "/eval.json"));
  CHECK(archived_report == json::parse(archived.out));
  json manifest = json::parse(testutil::read_file(eval_dir + "/manifest.json"));
  CHECK(manifest.at("command") == "evaluate");
  CHECK(manifest.at("status") == "completed");
  CHECK(manifest.at("lineage").at("init_checkpoint") == ckpt);
}

TEST_CASE("ssl panels show the original, the input, and the prediction") {
  testutil::TempDir dir("cli_viz");
  json cfg_json = base_config();
  cfg_json["mode"] = "multitask";
  cfg_json["ssl"]["task"] = "reconstruction";
  cfg_json["optim"]["epochs"] = 1;
  const std::string cfg = write_config(dir, "run.json", cfg_json);
  const std::string run_dir = dir.str() + "/run";
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --output-dir " +
                  quoted(run_dir))
              .exit_code == 0);
  const std::string ckpt = run_dir + "/checkpoints/last.ckpt";

  const std::string viz_dir = dir.str() + "/viz";
  CliResult r = run_cli("visualize-ssl --config " + quoted(cfg) + " --checkpoint " +
                        quoted(ckpt) + " --images 2 --output-dir " +
                        quoted(viz_dir));
  REQUIRE(r.exit_code == 0);
  REQUIRE(std::filesystem::exists(viz_dir + "/ssl_0.png"));
  REQUIRE(std::filesystem::exists(viz_dir + "/ssl_1.png"));

  Tensor grid = read_image(viz_dir + "/ssl_0.png");
  // three 32x32 panels separated by 2-pixel gutters
  REQUIRE(grid.shape() == std::vector<int64_t>{3, 32, 3 * 32 + 2 * 2});
  // reconstruction never alters the input, so the first two panels agree
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < 32; ++y) {
      for (int64_t x = 0; x < 32; ++x) {
        CHECK(grid.at(c, y, x) == grid.at(c, y, x + 34));
      }
    }
  }

  json manifest = json::parse(testutil::read_file(viz_dir + "/manifest.json"));
  CHECK(manifest.at("command") == "visualize-ssl");
  CHECK(manifest.at("artifacts").contains("ssl_0.png"));
}

TEST_CASE("generated datasets load back losslessly") {
  testutil::TempDir dir("cli_gen");
  const std::string out_a = dir.str() + "/a";
  CliResult r = run_cli("generate-data --num-images 5 --seed 9 --output-dir " +
                        quoted(out_a));
  REQUIRE(r.exit_code == 0);

  DetectionDataset ds = load_coco(out_a + "/annotations.json", out_a + "/images");
  CHECK(ds.images.size() == 5);
  CHECK(ds.num_classes() == 3);
  CHECK(ds.warnings.empty());  // every referenced image file exists

  const std::string out_b = dir.str() + "/b";
  REQUIRE(run_cli("generate-data --num-images 5 --seed 9 --output-dir " +
                  quoted(out_b))
              .exit_code == 0);
  CHECK(testutil::read_file(out_a + "/annotations.json") ==
        testutil::read_file(out_b + "/annotations.json"));

  CliResult collide = run_cli("generate-data --num-images 5 --output-dir " +
                              quoted(out_a));
  CHECK(collide.exit_code == 1);
  CHECK(collide.err.find("--force") != std::string::npos);
}

TEST_CASE("failures are machine-readable on request") {
  testutil::TempDir dir("cli_errors");
  CliResult io = run_cli("--json-errors train --config " +
                         quoted(dir.str() + "/absent.json") + " --output-dir " +
                         quoted(dir.str() + "/run"));
  CHECK(io.exit_code == 1);
  json err = json::parse(io.out);
  CHECK(err.at("error").at("type") == "io");
  CHECK(err.at("error").at("message").get<std::string>().find("absent.json") !=
        std::string::npos);

  const std::string cfg = write_config(dir, "run.json", base_config());
  CliResult config_err = run_cli("--json-errors train --config " + quoted(cfg) +
                                 " --ssl-task bogus --mode multitask" +
                                 " --output-dir " + quoted(dir.str() + "/run2"));
  CHECK(config_err.exit_code == 1);
  CHECK(json::parse(config_err.out).at("error").at("type") == "config");

  CliResult plain_err = run_cli("train --config " +
                                quoted(dir.str() + "/absent.json") +
                                " --output-dir " + quoted(dir.str() + "/run3"));
  CHECK(plain_err.exit_code == 1);
  CHECK(plain_err.out.empty());
  CHECK(plain_err.err.rfind("error:", 0) == 0);

  CHECK(run_cli("train").exit_code != 0);      // --output-dir is required
  CHECK(run_cli("frobnicate").exit_code != 0); // unknown subcommand
}

}  // TEST_SUITE
