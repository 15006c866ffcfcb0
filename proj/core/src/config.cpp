#include "ssldetr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ssldetr/errors.hpp"

namespace ssldetr {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) fail(path + "." + it.key(), "unknown key");
  }
}

int64_t get_int(const json& obj, const std::string& path, const char* key,
                int64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) fail(path + "." + key, "expected an integer");
  return v.get<int64_t>();
}

double get_num(const json& obj, const std::string& path, const char* key,
               double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) fail(path + "." + key, "expected a number");
  return v.get<double>();
}

std::string get_str(const json& obj, const std::string& path, const char* key,
                    const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) fail(path + "." + key, "expected a string");
  return v.get<std::string>();
}

void parse_model(const json& obj, const std::string& path, DetectorConfig& m) {
  check_keys(obj, path,
             {"num_queries", "num_classes", "encoder_layers", "decoder_layers",
              "attention_heads", "hidden_dim", "ffn_dim", "image_size"});
  m.num_queries = get_int(obj, path, "num_queries", m.num_queries);
  m.num_classes = get_int(obj, path, "num_classes", m.num_classes);
  m.encoder_layers = get_int(obj, path, "encoder_layers", m.encoder_layers);
  m.decoder_layers = get_int(obj, path, "decoder_layers", m.decoder_layers);
  m.attention_heads = get_int(obj, path, "attention_heads", m.attention_heads);
  m.hidden_dim = get_int(obj, path, "hidden_dim", m.hidden_dim);
  m.ffn_dim = get_int(obj, path, "ffn_dim", m.ffn_dim);
  m.image_size = get_int(obj, path, "image_size", m.image_size);
}

void parse_backbone(const json& obj, const std::string& path, BackboneConfig& b) {
  check_keys(obj, path,
             {"downsampling_factor", "feature_dim", "pretrained_weights", "kind"});
  b.downsampling_factor =
      get_int(obj, path, "downsampling_factor", b.downsampling_factor);
  b.feature_dim = get_int(obj, path, "feature_dim", b.feature_dim);
  b.pretrained_weights =
      get_str(obj, path, "pretrained_weights", b.pretrained_weights);
  std::string kind = get_str(obj, path, "kind", "conv");
  if (kind == "conv") {
    b.kind = BackboneKind::kConv;
  } else if (kind == "stub") {
    b.kind = BackboneKind::kStub;
  } else {
    fail(path + ".kind", "expected \"conv\" or \"stub\", got \"" + kind + "\"");
  }
}

void parse_optim(const json& obj, const std::string& path, OptimConfig& o) {
  check_keys(obj, path,
             {"learning_rate", "weight_decay", "batch_size", "grad_clip_norm",
              "epochs"});
  o.learning_rate = get_num(obj, path, "learning_rate", o.learning_rate);
  o.weight_decay = get_num(obj, path, "weight_decay", o.weight_decay);
  o.batch_size = get_int(obj, path, "batch_size", o.batch_size);
  o.grad_clip_norm = get_num(obj, path, "grad_clip_norm", o.grad_clip_norm);
  o.epochs = get_int(obj, path, "epochs", o.epochs);
}

void parse_ssl(const json& obj, const std::string& path, SSLRunConfig& s) {
  check_keys(obj, path,
             {"task", "ratio", "weight_schedule", "initial_weight",
              "final_weight", "vocab_size"});
  if (obj.contains("task")) {
    std::string task = get_str(obj, path, "task", "");
    try {
      s.task = ssl_task_from_string(task);
    } catch (const Error&) {
      fail(path + ".task", "unknown task \"" + task + "\"");
    }
  }
  s.ratio = get_num(obj, path, "ratio", s.ratio);
  s.weight_schedule = get_str(obj, path, "weight_schedule", s.weight_schedule);
  s.initial_weight = get_num(obj, path, "initial_weight", s.initial_weight);
  s.final_weight = get_num(obj, path, "final_weight", s.final_weight);
  s.vocab_size = get_int(obj, path, "vocab_size", s.vocab_size);
}

void parse_synthetic(const json& obj, const std::string& path, SyntheticConfig& s) {
  check_keys(obj, path,
             {"num_images", "image_size", "classes", "min_objects", "max_objects",
              "min_size", "max_size", "seed"});
  s.num_images = get_int(obj, path, "num_images", s.num_images);
  s.image_size = get_int(obj, path, "image_size", s.image_size);
  if (obj.contains("classes")) {
    const json& v = obj.at("classes");
    if (!v.is_array()) fail(path + ".classes", "expected an array of strings");
    s.classes.clear();
    for (const auto& item : v) {
      if (!item.is_string()) fail(path + ".classes", "expected an array of strings");
      s.classes.push_back(item.get<std::string>());
    }
  }
  s.min_objects = get_int(obj, path, "min_objects", s.min_objects);
  s.max_objects = get_int(obj, path, "max_objects", s.max_objects);
  s.min_size = get_int(obj, path, "min_size", s.min_size);
  s.max_size = get_int(obj, path, "max_size", s.max_size);
  s.seed = static_cast<uint64_t>(get_int(obj, path, "seed",
                                         static_cast<int64_t>(s.seed)));
}

void parse_data(const json& obj, const std::string& path, DataRunConfig& d) {
  check_keys(obj, path,
             {"kind", "train_annotations", "val_annotations", "image_root",
              "folder", "synthetic", "synthetic_val_images"});
  d.kind = get_str(obj, path, "kind", d.kind);
  d.train_annotations = get_str(obj, path, "train_annotations", d.train_annotations);
  d.val_annotations = get_str(obj, path, "val_annotations", d.val_annotations);
  d.image_root = get_str(obj, path, "image_root", d.image_root);
  d.folder = get_str(obj, path, "folder", d.folder);
  if (obj.contains("synthetic")) {
    const json& v = obj.at("synthetic");
    if (!v.is_object()) fail(path + ".synthetic", "expected an object");
    parse_synthetic(v, path + ".synthetic", d.synthetic);
  }
  d.synthetic_val_images =
      get_int(obj, path, "synthetic_val_images", d.synthetic_val_images);
}

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_run_config(const std::string& json_text, const std::string& origin) {
  json root = json::parse(json_text, nullptr, false);
  if (root.is_discarded()) fail(origin, "not valid JSON");
  if (!root.is_object()) fail(origin, "top-level value must be an object");

  RunConfig config;
  const std::string path = origin.empty() ? "config" : origin;
  check_keys(root, path,
             {"config_version", "seed", "mode", "model", "backbone", "optim",
              "ssl", "data"});
  config.config_version = get_int(root, path, "config_version", config.config_version);
  if (config.config_version != 1) {
    fail(path + ".config_version",
         "unsupported version " + std::to_string(config.config_version));
  }
  int64_t seed = get_int(root, path, "seed", static_cast<int64_t>(config.seed));
  if (seed < 0) fail(path + ".seed", "must be non-negative");
  config.seed = static_cast<uint64_t>(seed);
  config.mode = get_str(root, path, "mode", config.mode);
  auto section = [&](const char* key) -> const json* {
    if (!root.contains(key)) return nullptr;
    const json& v = root.at(key);
    if (!v.is_object()) fail(path + "." + key, "expected an object");
    return &v;
  };
  if (const json* v = section("model")) parse_model(*v, path + ".model", config.model);
  if (const json* v = section("backbone"))
    parse_backbone(*v, path + ".backbone", config.backbone);
  if (const json* v = section("optim")) parse_optim(*v, path + ".optim", config.optim);
  if (const json* v = section("ssl")) parse_ssl(*v, path + ".ssl", config.ssl);
  if (const json* v = section("data")) parse_data(*v, path + ".data", config.data);

  validate_run_config(config);
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path);
}

void validate_run_config(const RunConfig& config) {
  if (config.mode != "plain" && config.mode != "multitask" &&
      config.mode != "pretrain") {
    fail("mode", "expected plain, multitask, or pretrain, got \"" + config.mode + "\"");
  }

  const DetectorConfig& m = config.model;
  if (m.num_queries < 1) fail("model.num_queries", "must be >= 1");
  if (m.num_classes < 0) fail("model.num_classes", "must be >= 0");
  if (m.encoder_layers < 1) fail("model.encoder_layers", "must be >= 1");
  if (m.decoder_layers < 1) fail("model.decoder_layers", "must be >= 1");
  if (m.attention_heads < 1) fail("model.attention_heads", "must be >= 1");
  if (m.hidden_dim < 2 || m.hidden_dim % 2 != 0) {
    fail("model.hidden_dim", "must be a positive even number");
  }
  if (m.hidden_dim % m.attention_heads != 0) {
    fail("model.attention_heads", "must divide hidden_dim");
  }
  if (m.ffn_dim < 1) fail("model.ffn_dim", "must be >= 1");
  if (m.image_size < 1) fail("model.image_size", "must be >= 1");

  const BackboneConfig& b = config.backbone;
  if (!is_power_of_two(b.downsampling_factor)) {
    fail("backbone.downsampling_factor", "must be a power of two");
  }
  if (b.feature_dim < 1) fail("backbone.feature_dim", "must be >= 1");
  if (m.image_size % b.downsampling_factor != 0) {
    fail("model.image_size", "must be divisible by backbone.downsampling_factor");
  }

  const OptimConfig& o = config.optim;
  if (!(o.learning_rate > 0)) fail("optim.learning_rate", "must be > 0");
  if (o.weight_decay < 0) fail("optim.weight_decay", "must be >= 0");
  if (o.batch_size < 1) fail("optim.batch_size", "must be >= 1");
  if (o.epochs < 1) fail("optim.epochs", "must be >= 1");

  const SSLRunConfig& s = config.ssl;
  if (s.ratio < 0.0 || s.ratio > 1.0) fail("ssl.ratio", "must be in [0, 1]");
  if (config.mode == "pretrain" && s.ratio <= 0.0) {
    fail("ssl.ratio", "must be > 0 when pre-training (ratio 0 selects no "
                      "patches, so the task has zero loss)");
  }
  if (s.weight_schedule != "constant" && s.weight_schedule != "linear") {
    fail("ssl.weight_schedule",
         "expected constant or linear, got \"" + s.weight_schedule + "\"");
  }
  if (s.initial_weight < 0) fail("ssl.initial_weight", "must be >= 0");
  if (s.final_weight < 0) fail("ssl.final_weight", "must be >= 0");
  if (s.vocab_size < 2) fail("ssl.vocab_size", "must be >= 2");

  const DataRunConfig& d = config.data;
  if (d.kind != "synthetic" && d.kind != "coco" && d.kind != "folder") {
    fail("data.kind", "expected synthetic, coco, or folder, got \"" + d.kind + "\"");
  }
  if (d.kind == "coco" && d.train_annotations.empty()) {
    fail("data.train_annotations", "required when data.kind is coco");
  }
  if (d.kind == "folder" && d.folder.empty()) {
    fail("data.folder", "required when data.kind is folder");
  }
  if (d.kind == "folder" && config.mode != "pretrain") {
    fail("data.kind", "an unlabeled folder only supports pretrain mode");
  }
  const SyntheticConfig& syn = d.synthetic;
  if (d.kind == "synthetic") {
    if (syn.num_images < 1) fail("data.synthetic.num_images", "must be >= 1");
    if (syn.image_size < 8) fail("data.synthetic.image_size", "must be >= 8");
    if (syn.classes.empty()) fail("data.synthetic.classes", "must not be empty");
    for (const std::string& c : syn.classes) {
      if (c != "circle" && c != "square" && c != "triangle") {
        fail("data.synthetic.classes", "unknown shape \"" + c + "\"");
      }
    }
    if (syn.min_objects < 1) fail("data.synthetic.min_objects", "must be >= 1");
    if (syn.max_objects < syn.min_objects) {
      fail("data.synthetic.max_objects", "must be >= min_objects");
    }
    if (syn.min_size < 4) fail("data.synthetic.min_size", "must be >= 4");
    if (syn.max_size < syn.min_size) {
      fail("data.synthetic.max_size", "must be >= min_size");
    }
    if (syn.max_size >= syn.image_size) {
      fail("data.synthetic.max_size", "must be < image_size");
    }
    if (d.synthetic_val_images < 0) {
      fail("data.synthetic_val_images", "must be >= 0");
    }
  }
}

std::string run_config_to_json(const RunConfig& config) {
  json root;
  root["config_version"] = config.config_version;
  root["seed"] = config.seed;
  root["mode"] = config.mode;
  const DetectorConfig& m = config.model;
  root["model"] = {{"num_queries", m.num_queries},
                   {"num_classes", m.num_classes},
                   {"encoder_layers", m.encoder_layers},
                   {"decoder_layers", m.decoder_layers},
                   {"attention_heads", m.attention_heads},
                   {"hidden_dim", m.hidden_dim},
                   {"ffn_dim", m.ffn_dim},
                   {"image_size", m.image_size}};
  const BackboneConfig& b = config.backbone;
  root["backbone"] = {{"downsampling_factor", b.downsampling_factor},
                      {"feature_dim", b.feature_dim},
                      {"pretrained_weights", b.pretrained_weights},
                      {"kind", b.kind == BackboneKind::kConv ? "conv" : "stub"}};
  const OptimConfig& o = config.optim;
  root["optim"] = {{"learning_rate", o.learning_rate},
                   {"weight_decay", o.weight_decay},
                   {"batch_size", o.batch_size},
                   {"grad_clip_norm", o.grad_clip_norm},
                   {"epochs", o.epochs}};
  const SSLRunConfig& s = config.ssl;
  root["ssl"] = {{"task", to_string(s.task)},
                 {"ratio", s.ratio},
                 {"weight_schedule", s.weight_schedule},
                 {"initial_weight", s.initial_weight},
                 {"final_weight", s.final_weight},
                 {"vocab_size", s.vocab_size}};
  const DataRunConfig& d = config.data;
  const SyntheticConfig& syn = d.synthetic;
  root["data"] = {{"kind", d.kind},
                  {"train_annotations", d.train_annotations},
                  {"val_annotations", d.val_annotations},
                  {"image_root", d.image_root},
                  {"folder", d.folder},
                  {"synthetic",
                   {{"num_images", syn.num_images},
                    {"image_size", syn.image_size},
                    {"classes", syn.classes},
                    {"min_objects", syn.min_objects},
                    {"max_objects", syn.max_objects},
                    {"min_size", syn.min_size},
                    {"max_size", syn.max_size},
                    {"seed", syn.seed}}},
                  {"synthetic_val_images", d.synthetic_val_images}};
  return root.dump(2);
}

}  // namespace ssldetr
