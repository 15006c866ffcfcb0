#pragma once

#include <cstdint>
#include <vector>

#include "ssldetr/rng.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Patch decomposition of an image whose patch size equals the CNN backbone's
// downsampling factor, so patch p corresponds to encoder token p. Patches are
// indexed row-major: p = row * cols + col.
struct PatchGrid {
  int64_t image_height = 0;
  int64_t image_width = 0;
  int64_t patch_size = 0;
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t num_patches = 0;

  int64_t row_of(int64_t p) const { return p / cols; }
  int64_t col_of(int64_t p) const { return p % cols; }
  int64_t index_of(int64_t row, int64_t col) const { return row * cols + col; }

  bool operator==(const PatchGrid&) const = default;
};

// Ordered set of distinct patch indices drawn for an SSL task.
struct PatchSelection {
  PatchGrid grid;
  std::vector<int64_t> indices;  // ascending
  double ratio = 0.0;
};

// Bijection over the slots of a selection: mapping[i] is the destination
// slot of source slot i.
struct PatchPermutation {
  PatchSelection selection;
  std::vector<int64_t> mapping;

  std::vector<int64_t> inverse() const;
};

PatchGrid compute_grid(int64_t image_height, int64_t image_width, int64_t downsampling_factor);

// image [C, H, W] -> patches [num_patches, C, f, f], row-major patch order.
Tensor extract_patches(const Tensor& image, const PatchGrid& grid);

// Exact inverse of extract_patches.
Tensor reassemble_patches(const Tensor& patches, const PatchGrid& grid);

// round(ratio * num_patches) distinct indices, uniform without replacement,
// reported in ascending order. round() is half-up.
PatchSelection sample_selection(const PatchGrid& grid, double ratio, Rng& rng);

// Uniform random bijection over the selection's slots; for selections of
// size >= 2 the global identity is excluded by resampling.
PatchPermutation sample_permutation(const PatchSelection& selection, Rng& rng);

}  // namespace ssldetr
