#pragma once

#include <string>

#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Images are Tensors of shape [3, H, W], RGB, values in [0, 1].

Tensor read_image(const std::string& path);
void write_image(const std::string& path, const Tensor& image);

// Bilinear resize with align_corners=false sampling. Identity when the
// target equals the source size.
Tensor resize_bilinear(const Tensor& image, int64_t target_height, int64_t target_width);

// Per-channel mean pixel value of an image, shape [C].
Tensor channel_means(const Tensor& image);

}  // namespace ssldetr
