#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssldetr/detector.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

namespace testutil {

inline std::string data_dir() {
#ifdef SSLDETR_TEST_DATA_DIR
  return SSLDETR_TEST_DATA_DIR;
#else
  return "tests/data";
#endif
}

inline std::string data_path(const std::string& name) {
  return data_dir() + "/" + name;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw std::runtime_error("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ssldetr_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline ssldetr::Tensor random_image(int64_t h, int64_t w, ssldetr::Rng& rng) {
  ssldetr::Tensor img({3, h, w});
  for (int64_t i = 0; i < img.numel(); ++i) {
    img[i] = rng.uniform();
  }
  return img;
}

// Small detector used across suites; widths stay tiny so tape-level
// finite-difference checks remain fast.
inline ssldetr::DetectorConfig tiny_detector_config() {
  ssldetr::DetectorConfig c;
  c.num_queries = 4;
  c.num_classes = 3;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.attention_heads = 2;
  c.hidden_dim = 16;
  c.ffn_dim = 32;
  c.image_size = 32;
  return c;
}

inline ssldetr::BackboneConfig tiny_backbone_config() {
  ssldetr::BackboneConfig b;
  b.downsampling_factor = 8;
  b.feature_dim = 12;
  return b;
}

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

}  // namespace testutil
