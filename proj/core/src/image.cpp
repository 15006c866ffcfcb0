#include "ssldetr/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "ssldetr/errors.hpp"

namespace ssldetr {

namespace {

void require_chw(const Tensor& image) {
  if (image.rank() != 3) {
    throw ShapeError("expected image [C,H,W], got " + image.shape_str());
  }
}

}  // namespace

Tensor read_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) {
    throw IoError("failed to read image: " + path);
  }
  const int64_t h = bgr.rows, w = bgr.cols;
  Tensor image({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      image.at(0, y, x) = row[x][2] / 255.0;  // OpenCV stores BGR
      image.at(1, y, x) = row[x][1] / 255.0;
      image.at(2, y, x) = row[x][0] / 255.0;
    }
  }
  return image;
}

void write_image(const std::string& path, const Tensor& image) {
  require_chw(image);
  if (image.dim(0) != 3) {
    throw ShapeError("write_image: expected 3 channels, got " + image.shape_str());
  }
  const int64_t h = image.dim(1), w = image.dim(2);
  cv::Mat bgr(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  for (int64_t y = 0; y < h; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        row[x][static_cast<int>(2 - c)] = static_cast<uchar>(std::lround(v * 255.0));
      }
    }
  }
  if (!cv::imwrite(path, bgr)) {
    throw IoError("failed to write image: " + path);
  }
}

Tensor resize_bilinear(const Tensor& image, int64_t target_height, int64_t target_width) {
  require_chw(image);
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (target_height <= 0 || target_width <= 0) {
    throw DimensionError("resize_bilinear: target must be positive");
  }
  if (target_height == h && target_width == w) {
    return image;
  }
  Tensor out({c, target_height, target_width});
  const double sy = static_cast<double>(h) / static_cast<double>(target_height);
  const double sx = static_cast<double>(w) / static_cast<double>(target_width);
  for (int64_t oy = 0; oy < target_height; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int64_t y0 = static_cast<int64_t>(std::floor(fy));
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t ox = 0; ox < target_width; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int64_t x0 = static_cast<int64_t>(std::floor(fx));
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int64_t ci = 0; ci < c; ++ci) {
        const double top = image.at(ci, y0, x0) * (1.0 - wx) + image.at(ci, y0, x1) * wx;
        const double bot = image.at(ci, y1, x0) * (1.0 - wx) + image.at(ci, y1, x1) * wx;
        out.at(ci, oy, ox) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Tensor channel_means(const Tensor& image) {
  require_chw(image);
  const int64_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  Tensor means({c});
  for (int64_t ci = 0; ci < c; ++ci) {
    double s = 0.0;
    const double* p = image.data() + ci * hw;
    for (int64_t i = 0; i < hw; ++i) {
      s += p[i];
    }
    means[ci] = s / static_cast<double>(hw);
  }
  return means;
}

}  // namespace ssldetr
