#include "ssldetr/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ssldetr/errors.hpp"
#include "ssldetr/image.hpp"

namespace ssldetr {

namespace fs = std::filesystem;
using nlohmann::json;

bool DetectionDataset::has_annotations() const {
  for (const auto& img : images) {
    if (!img.gt.empty()) return true;
  }
  return false;
}

namespace {

json parse_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path + ": cannot open for reading");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw IoError(path + ": parse error at byte " + std::to_string(e.byte) +
                  ": " + e.what());
  }
}

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

DetectionDataset load_coco(const std::string& annotation_file,
                           const std::string& image_root) {
  const json doc = parse_json_file(annotation_file);
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw IoError(annotation_file + ": missing \"" + key + "\" array");
    }
  }

  DetectionDataset out;

  std::vector<std::pair<int64_t, std::string>> cats;
  for (const auto& c : doc["categories"]) {
    cats.emplace_back(c.at("id").get<int64_t>(), c.at("name").get<std::string>());
  }
  std::sort(cats.begin(), cats.end());
  std::map<int64_t, int64_t> cat_remap;
  for (size_t i = 0; i < cats.size(); ++i) {
    cat_remap[cats[i].first] = static_cast<int64_t>(i);
    out.classes[static_cast<int64_t>(i)] = cats[i].second;
    out.category_source_ids[static_cast<int64_t>(i)] = cats[i].first;
  }

  std::map<int64_t, size_t> index_of;
  for (const auto& im : doc["images"]) {
    ImageRecord rec;
    rec.id = im.at("id").get<int64_t>();
    rec.height = im.at("height").get<int64_t>();
    rec.width = im.at("width").get<int64_t>();
    const std::string file_name = im.value("file_name", std::string());
    if (!image_root.empty() && !file_name.empty()) {
      rec.path = (fs::path(image_root) / file_name).string();
      if (!fs::exists(rec.path)) {
        out.warnings.push_back("missing image file: " + rec.path);
      }
    } else if (!file_name.empty()) {
      rec.path = file_name;
    }
    if (index_of.count(rec.id)) {
      throw IoError(annotation_file + ": duplicate image id " + std::to_string(rec.id));
    }
    index_of[rec.id] = out.images.size();
    out.images.push_back(std::move(rec));
  }

  int64_t clamped = 0;
  for (const auto& a : doc["annotations"]) {
    const int64_t image_id = a.at("image_id").get<int64_t>();
    auto it = index_of.find(image_id);
    if (it == index_of.end()) {
      throw IoError(annotation_file + ": annotation references unknown image id " +
                    std::to_string(image_id));
    }
    const int64_t cat_id = a.at("category_id").get<int64_t>();
    auto cit = cat_remap.find(cat_id);
    if (cit == cat_remap.end()) {
      throw IoError(annotation_file + ": annotation references unknown category id " +
                    std::to_string(cat_id));
    }
    const auto& bb = a.at("bbox");
    if (!bb.is_array() || bb.size() != 4) {
      throw IoError(annotation_file + ": bbox must be [x, y, w, h]");
    }
    ImageRecord& rec = out.images[it->second];
    const double w_img = static_cast<double>(rec.width);
    const double h_img = static_cast<double>(rec.height);
    const double x = bb[0].get<double>();
    const double y = bb[1].get<double>();
    const double w = bb[2].get<double>();
    const double h = bb[3].get<double>();
    const double x0 = clamp(x, 0.0, w_img);
    const double y0 = clamp(y, 0.0, h_img);
    const double x1 = clamp(x + w, 0.0, w_img);
    const double y1 = clamp(y + h, 0.0, h_img);
    if (x0 != x || y0 != y || x1 != x + w || y1 != y + h) ++clamped;
    if (x1 <= x0 || y1 <= y0) {
      out.warnings.push_back("degenerate box dropped on image " +
                             std::to_string(image_id));
      continue;
    }
    rec.gt.labels.push_back(cit->second);
    rec.gt.boxes.push_back({(x0 + x1) / 2.0 / w_img, (y0 + y1) / 2.0 / h_img,
                            (x1 - x0) / w_img, (y1 - y0) / h_img});
  }
  if (clamped > 0) {
    out.warnings.push_back(std::to_string(clamped) +
                           " box(es) clamped to image bounds");
  }
  return out;
}

void save_coco(const DetectionDataset& dataset, const std::string& annotation_file,
               const std::string& image_dir) {
  json doc;
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  doc["categories"] = json::array();

  for (const auto& [id, name] : dataset.classes) {
    auto src = dataset.category_source_ids.find(id);
    const int64_t out_id = src == dataset.category_source_ids.end() ? id + 1 : src->second;
    doc["categories"].push_back({{"id", out_id}, {"name", name}});
  }

  if (!image_dir.empty()) fs::create_directories(image_dir);
  int64_t ann_id = 1;
  for (const auto& rec : dataset.images) {
    std::string file_name;
    if (!rec.path.empty()) {
      file_name = fs::path(rec.path).filename().string();
    } else {
      file_name = "img_" + std::to_string(rec.id) + ".png";
      if (image_dir.empty()) {
        throw IoError("save_coco: generated image " + std::to_string(rec.id) +
                      " needs an image_dir to be written to");
      }
      write_image((fs::path(image_dir) / file_name).string(), rec.pixels);
    }
    doc["images"].push_back({{"id", rec.id},
                             {"file_name", file_name},
                             {"height", rec.height},
                             {"width", rec.width}});
    for (int64_t g = 0; g < rec.gt.size(); ++g) {
      const Box& b = rec.gt.boxes[static_cast<size_t>(g)];
      const double w = b[2] * static_cast<double>(rec.width);
      const double h = b[3] * static_cast<double>(rec.height);
      const double x = b[0] * static_cast<double>(rec.width) - w / 2.0;
      const double y = b[1] * static_cast<double>(rec.height) - h / 2.0;
      const int64_t label = rec.gt.labels[static_cast<size_t>(g)];
      auto src = dataset.category_source_ids.find(label);
      const int64_t cat_id = src == dataset.category_source_ids.end() ? label + 1 : src->second;
      doc["annotations"].push_back({{"id", ann_id++},
                                    {"image_id", rec.id},
                                    {"category_id", cat_id},
                                    {"bbox", {x, y, w, h}},
                                    {"area", w * h},
                                    {"iscrowd", 0}});
    }
  }

  std::ofstream os(annotation_file, std::ios::trunc);
  if (!os) throw IoError(annotation_file + ": cannot open for writing");
  os << doc.dump(1) << "\n";
  if (!os) throw IoError(annotation_file + ": write failed");
}

DetectionDataset load_image_folder(const std::string& folder) {
  if (!fs::is_directory(folder)) {
    throw IoError(folder + ": not a directory");
  }
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(folder)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  DetectionDataset out;
  for (size_t i = 0; i < paths.size(); ++i) {
    const Tensor pixels = read_image(paths[i]);
    ImageRecord rec;
    rec.id = static_cast<int64_t>(i);
    rec.path = paths[i];
    rec.height = pixels.dim(1);
    rec.width = pixels.dim(2);
    out.images.push_back(std::move(rec));
  }
  return out;
}

namespace {

struct Extent {
  int64_t x0 = -1, y0 = -1, x1 = -1, y1 = -1;  // inclusive pixel bounds
  bool any = false;

  void cover(int64_t x, int64_t y) {
    if (!any) {
      x0 = x1 = x;
      y0 = y1 = y;
      any = true;
    } else {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
};

}  // namespace

DetectionDataset generate_synthetic(const SyntheticConfig& config) {
  if (config.num_images < 0 || config.image_size < 8 ||
      config.min_objects < 0 || config.max_objects < config.min_objects ||
      config.min_size < 3 || config.max_size < config.min_size ||
      config.max_size > config.image_size) {
    throw ConfigError("generate_synthetic: invalid configuration");
  }
  if (config.classes.empty()) {
    throw ConfigError("generate_synthetic: at least one shape class required");
  }
  enum Shape { kCircle, kSquare, kTriangle };
  std::vector<Shape> shapes;
  for (const auto& name : config.classes) {
    if (name == "circle") {
      shapes.push_back(kCircle);
    } else if (name == "square") {
      shapes.push_back(kSquare);
    } else if (name == "triangle") {
      shapes.push_back(kTriangle);
    } else {
      throw ConfigError("generate_synthetic: unknown shape class \"" + name +
                        "\" (supported: circle, square, triangle)");
    }
  }

  DetectionDataset out;
  for (size_t k = 0; k < config.classes.size(); ++k) {
    out.classes[static_cast<int64_t>(k)] = config.classes[k];
  }

  Rng rng(config.seed);
  const int64_t s_img = config.image_size;
  const double img_d = static_cast<double>(s_img);
  for (int64_t i = 0; i < config.num_images; ++i) {
    ImageRecord rec;
    rec.id = i;
    rec.height = s_img;
    rec.width = s_img;
    rec.pixels = Tensor::zeros({3, s_img, s_img});
    for (int64_t v = 0; v < rec.pixels.numel(); ++v) {
      rec.pixels[v] = 0.05 + 0.10 * rng.uniform();
    }

    const int64_t n_obj = config.min_objects == config.max_objects
                              ? config.min_objects
                              : rng.uniform_int(config.min_objects, config.max_objects);
    std::vector<std::array<int64_t, 4>> placed;  // x0, y0, x1, y1 inclusive
    for (int64_t o = 0; o < n_obj; ++o) {
      const int64_t cls = config.classes.size() == 1
                              ? 0
                              : rng.uniform_int(0, static_cast<int64_t>(config.classes.size()) - 1);
      const int64_t side = config.min_size == config.max_size
                               ? config.min_size
                               : rng.uniform_int(config.min_size, config.max_size);
      int64_t x0 = -1, y0 = -1;
      bool found = false;
      for (int attempt = 0; attempt < 50 && !found; ++attempt) {
        x0 = rng.uniform_int(0, s_img - side);
        y0 = rng.uniform_int(0, s_img - side);
        found = true;
        for (const auto& box : placed) {
          if (x0 <= box[2] && x0 + side - 1 >= box[0] && y0 <= box[3] &&
              y0 + side - 1 >= box[1]) {
            found = false;
            break;
          }
        }
      }
      if (!found) continue;

      double color[3];
      for (double& c : color) c = 0.35 + 0.65 * rng.uniform();

      Extent ext;
      const double c_mid = static_cast<double>(side - 1) / 2.0;
      for (int64_t dy = 0; dy < side; ++dy) {
        for (int64_t dx = 0; dx < side; ++dx) {
          bool inside = false;
          switch (shapes[static_cast<size_t>(cls)]) {
            case kSquare:
              inside = true;
              break;
            case kCircle: {
              const double rx = static_cast<double>(dx) - c_mid;
              const double ry = static_cast<double>(dy) - c_mid;
              inside = rx * rx + ry * ry <= c_mid * c_mid + 1e-9;
              break;
            }
            case kTriangle: {
              const double half = side <= 1 ? 0.0
                                            : static_cast<double>(dy) /
                                                  static_cast<double>(side - 1) * c_mid;
              inside = std::abs(static_cast<double>(dx) - c_mid) <= half + 1e-9;
              break;
            }
          }
          if (!inside) continue;
          const int64_t px = x0 + dx;
          const int64_t py = y0 + dy;
          for (int64_t c = 0; c < 3; ++c) rec.pixels.at(c, py, px) = color[c];
          ext.cover(px, py);
        }
      }
      if (!ext.any) continue;

      placed.push_back({ext.x0, ext.y0, ext.x1, ext.y1});
      const double bw = static_cast<double>(ext.x1 - ext.x0 + 1);
      const double bh = static_cast<double>(ext.y1 - ext.y0 + 1);
      rec.gt.labels.push_back(cls);
      rec.gt.boxes.push_back({(static_cast<double>(ext.x0) + bw / 2.0) / img_d,
                              (static_cast<double>(ext.y0) + bh / 2.0) / img_d,
                              bw / img_d, bh / img_d});
    }
    out.images.push_back(std::move(rec));
  }
  return out;
}

Tensor load_pixels(const ImageRecord& record) {
  if (record.pixels.numel() > 0) return record.pixels;
  if (record.path.empty()) {
    throw IoError("image " + std::to_string(record.id) +
                  " has neither pixels nor a path");
  }
  return read_image(record.path);
}

Tensor resize_and_normalize(const Tensor& image, int64_t target_size,
                            int64_t downsampling_factor) {
  if (downsampling_factor < 1 || target_size < 1 ||
      target_size % downsampling_factor != 0) {
    throw DimensionError("resize_and_normalize: target size " +
                         std::to_string(target_size) +
                         " is not divisible by the downsampling factor " +
                         std::to_string(downsampling_factor));
  }
  return resize_bilinear(image, target_size, target_size);
}

Tensor normalize_input(const Tensor& image) {
  Tensor out = image;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 2.0 * out[i] - 1.0;
  return out;
}

}  // namespace ssldetr
