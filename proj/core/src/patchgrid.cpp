#include "ssldetr/patchgrid.hpp"

#include <algorithm>
#include <cmath>

#include "ssldetr/errors.hpp"

namespace ssldetr {

std::vector<int64_t> PatchPermutation::inverse() const {
  std::vector<int64_t> inv(mapping.size());
  for (size_t i = 0; i < mapping.size(); ++i) {
    inv[static_cast<size_t>(mapping[i])] = static_cast<int64_t>(i);
  }
  return inv;
}

PatchGrid compute_grid(int64_t image_height, int64_t image_width, int64_t downsampling_factor) {
  if (image_height <= 0 || image_width <= 0 || downsampling_factor <= 0) {
    throw DimensionError("compute_grid: dimensions and factor must be positive");
  }
  if (image_height % downsampling_factor != 0) {
    throw DimensionError("compute_grid: height " + std::to_string(image_height) +
                         " not divisible by downsampling factor " +
                         std::to_string(downsampling_factor));
  }
  if (image_width % downsampling_factor != 0) {
    throw DimensionError("compute_grid: width " + std::to_string(image_width) +
                         " not divisible by downsampling factor " +
                         std::to_string(downsampling_factor));
  }
  PatchGrid g;
  g.image_height = image_height;
  g.image_width = image_width;
  g.patch_size = downsampling_factor;
  g.rows = image_height / downsampling_factor;
  g.cols = image_width / downsampling_factor;
  g.num_patches = g.rows * g.cols;
  return g;
}

Tensor extract_patches(const Tensor& image, const PatchGrid& grid) {
  if (image.rank() != 3 || image.dim(1) != grid.image_height || image.dim(2) != grid.image_width) {
    throw ShapeError("extract_patches: image " + image.shape_str() + " does not match grid " +
                     std::to_string(grid.image_height) + "x" + std::to_string(grid.image_width));
  }
  const int64_t c = image.dim(0), f = grid.patch_size;
  Tensor patches({grid.num_patches, c, f, f});
  double* out = patches.data();
  for (int64_t p = 0; p < grid.num_patches; ++p) {
    const int64_t y0 = grid.row_of(p) * f;
    const int64_t x0 = grid.col_of(p) * f;
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t dy = 0; dy < f; ++dy) {
        for (int64_t dx = 0; dx < f; ++dx) {
          *out++ = image.at(ci, y0 + dy, x0 + dx);
        }
      }
    }
  }
  return patches;
}

Tensor reassemble_patches(const Tensor& patches, const PatchGrid& grid) {
  if (patches.rank() != 4 || patches.dim(0) != grid.num_patches ||
      patches.dim(2) != grid.patch_size || patches.dim(3) != grid.patch_size) {
    throw ShapeError("reassemble_patches: patches " + patches.shape_str() +
                     " do not match grid with " + std::to_string(grid.num_patches) +
                     " patches of size " + std::to_string(grid.patch_size));
  }
  const int64_t c = patches.dim(1), f = grid.patch_size;
  Tensor image({c, grid.image_height, grid.image_width});
  const double* in = patches.data();
  for (int64_t p = 0; p < grid.num_patches; ++p) {
    const int64_t y0 = grid.row_of(p) * f;
    const int64_t x0 = grid.col_of(p) * f;
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t dy = 0; dy < f; ++dy) {
        for (int64_t dx = 0; dx < f; ++dx) {
          image.at(ci, y0 + dy, x0 + dx) = *in++;
        }
      }
    }
  }
  return image;
}

PatchSelection sample_selection(const PatchGrid& grid, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw RangeError("sample_selection: ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
  const int64_t count =
      static_cast<int64_t>(std::floor(ratio * static_cast<double>(grid.num_patches) + 0.5));
  PatchSelection sel;
  sel.grid = grid;
  sel.ratio = ratio;
  sel.indices = rng.sample_without_replacement(grid.num_patches, count);
  std::sort(sel.indices.begin(), sel.indices.end());
  return sel;
}

PatchPermutation sample_permutation(const PatchSelection& selection, Rng& rng) {
  const int64_t k = static_cast<int64_t>(selection.indices.size());
  PatchPermutation perm;
  perm.selection = selection;
  perm.mapping.resize(static_cast<size_t>(k));
  std::iota(perm.mapping.begin(), perm.mapping.end(), 0);
  if (k < 2) {
    return perm;
  }
  const auto is_identity = [&] {
    for (int64_t i = 0; i < k; ++i) {
      if (perm.mapping[static_cast<size_t>(i)] != i) {
        return false;
      }
    }
    return true;
  };
  do {
    rng.shuffle(perm.mapping);
  } while (is_identity());
  return perm;
}

}  // namespace ssldetr
