#include "ssldetr/ssl_tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssldetr/errors.hpp"
#include "ssldetr/image.hpp"

namespace ssldetr {

const char* to_string(SSLTaskKind kind) {
  switch (kind) {
    case SSLTaskKind::Reconstruction:
      return "reconstruction";
    case SSLTaskKind::MimContinuous:
      return "mim_continuous";
    case SSLTaskKind::MimDiscrete:
      return "mim_discrete";
    case SSLTaskKind::JigsawContinuous:
      return "jigsaw_continuous";
    case SSLTaskKind::JigsawDiscrete:
      return "jigsaw_discrete";
  }
  return "unknown";
}

SSLTaskKind ssl_task_from_string(const std::string& name) {
  if (name == "reconstruction") return SSLTaskKind::Reconstruction;
  if (name == "mim_continuous") return SSLTaskKind::MimContinuous;
  if (name == "mim_discrete") return SSLTaskKind::MimDiscrete;
  if (name == "jigsaw_continuous") return SSLTaskKind::JigsawContinuous;
  if (name == "jigsaw_discrete") return SSLTaskKind::JigsawDiscrete;
  throw ConfigError("unknown ssl task: " + name);
}

bool is_continuous(SSLTaskKind kind) {
  return kind == SSLTaskKind::Reconstruction || kind == SSLTaskKind::MimContinuous ||
         kind == SSLTaskKind::JigsawContinuous;
}

MeanColorQuantizer::MeanColorQuantizer(int64_t vocabulary_size) : vocab_(vocabulary_size) {
  if (vocab_ < 1) {
    throw ConfigError("MeanColorQuantizer: vocabulary must be >= 1");
  }
}

std::vector<int64_t> MeanColorQuantizer::encode(const Tensor& patches) const {
  if (patches.rank() != 4) {
    throw ShapeError("MeanColorQuantizer::encode expects [P, C, f, f], got " +
                     patches.shape_str());
  }
  const int64_t p = patches.dim(0), c = patches.dim(1);
  const int64_t area = patches.dim(2) * patches.dim(3);
  const int64_t bins = std::max<int64_t>(
      1, static_cast<int64_t>(std::floor(std::pow(static_cast<double>(vocab_) + 1e-9,
                                                  1.0 / static_cast<double>(c)))));
  std::vector<int64_t> ids(static_cast<size_t>(p));
  for (int64_t pi = 0; pi < p; ++pi) {
    int64_t id = 0;
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* block = patches.data() + (pi * c + ci) * area;
      double mean = 0.0;
      for (int64_t i = 0; i < area; ++i) {
        mean += block[i];
      }
      mean /= static_cast<double>(area);
      const int64_t bin = std::min<int64_t>(
          bins - 1, static_cast<int64_t>(std::floor(mean * static_cast<double>(bins))));
      id = id * bins + std::max<int64_t>(0, bin);
    }
    ids[static_cast<size_t>(pi)] = id;
  }
  return ids;
}

namespace {

void check_image(const Tensor& image, const PatchGrid& grid) {
  if (image.rank() != 3 || image.dim(1) != grid.image_height ||
      image.dim(2) != grid.image_width) {
    throw ShapeError("ssl task: image " + image.shape_str() + " does not match grid " +
                     std::to_string(grid.image_height) + "x" + std::to_string(grid.image_width));
  }
}

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw RangeError("ssl task: ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
}

void fill_patch(Tensor& image, const PatchGrid& grid, int64_t p, const Tensor& per_channel) {
  const int64_t f = grid.patch_size;
  const int64_t y0 = grid.row_of(p) * f, x0 = grid.col_of(p) * f;
  for (int64_t c = 0; c < image.dim(0); ++c) {
    for (int64_t dy = 0; dy < f; ++dy) {
      for (int64_t dx = 0; dx < f; ++dx) {
        image.at(c, y0 + dy, x0 + dx) = per_channel[c];
      }
    }
  }
}

// Rearranges the selected patches by the permutation; all other pixels keep
// their original values.
Tensor permute_selected_patches(const Tensor& image, const PatchGrid& grid,
                                const PatchPermutation& perm) {
  Tensor patches = extract_patches(image, grid);
  Tensor shuffled = patches;
  const auto& sel = perm.selection.indices;
  const int64_t patch_elems = patches.numel() / std::max<int64_t>(1, grid.num_patches);
  for (size_t i = 0; i < sel.size(); ++i) {
    const int64_t src = sel[i];
    const int64_t dst = sel[static_cast<size_t>(perm.mapping[i])];
    std::copy(patches.data() + src * patch_elems, patches.data() + (src + 1) * patch_elems,
              shuffled.data() + dst * patch_elems);
  }
  return reassemble_patches(shuffled, grid);
}

}  // namespace

SSLSample make_reconstruction(const Tensor& image, const PatchGrid& grid) {
  check_image(image, grid);
  SSLSample s;
  s.kind = SSLTaskKind::Reconstruction;
  s.grid = grid;
  s.input_image = image;
  s.target_image = image;
  s.loss_indices.resize(static_cast<size_t>(grid.num_patches));
  std::iota(s.loss_indices.begin(), s.loss_indices.end(), 0);
  return s;
}

SSLSample make_mim_continuous(const Tensor& image, const PatchGrid& grid, double ratio, Rng& rng) {
  check_image(image, grid);
  check_ratio(ratio);
  SSLSample s;
  s.kind = SSLTaskKind::MimContinuous;
  s.grid = grid;
  s.target_image = image;
  s.input_image = image;
  const PatchSelection sel = sample_selection(grid, ratio, rng);
  const Tensor means = channel_means(image);
  for (int64_t p : sel.indices) {
    fill_patch(s.input_image, grid, p, means);
  }
  s.loss_indices = sel.indices;
  return s;
}

SSLSample make_mim_discrete(const Tensor& image, const PatchGrid& grid, double ratio,
                            const VisualTokenizer* tokenizer, Rng& rng) {
  if (tokenizer == nullptr) {
    throw ConfigError("mim_discrete requires a visual tokenizer");
  }
  SSLSample s = make_mim_continuous(image, grid, ratio, rng);
  s.kind = SSLTaskKind::MimDiscrete;
  s.label_space = tokenizer->vocabulary_size();
  const Tensor original_patches = extract_patches(image, grid);
  const std::vector<int64_t> all_ids = tokenizer->encode(original_patches);
  s.target_labels.reserve(s.loss_indices.size());
  for (int64_t p : s.loss_indices) {
    const int64_t id = all_ids[static_cast<size_t>(p)];
    if (id < 0 || id >= s.label_space) {
      throw RangeError("tokenizer produced id outside [0, vocabulary)");
    }
    s.target_labels.push_back(id);
  }
  return s;
}

SSLSample make_jigsaw_continuous(const Tensor& image, const PatchGrid& grid, double ratio,
                                 Rng& rng) {
  check_image(image, grid);
  check_ratio(ratio);
  SSLSample s;
  s.kind = SSLTaskKind::JigsawContinuous;
  s.grid = grid;
  s.target_image = image;
  const PatchSelection sel = sample_selection(grid, ratio, rng);
  const PatchPermutation perm = sample_permutation(sel, rng);
  s.input_image = permute_selected_patches(image, grid, perm);
  s.loss_indices = sel.indices;
  s.permutation = perm;
  return s;
}

SSLSample make_jigsaw_discrete(const Tensor& image, const PatchGrid& grid, double ratio,
                               Rng& rng) {
  SSLSample s = make_jigsaw_continuous(image, grid, ratio, rng);
  s.kind = SSLTaskKind::JigsawDiscrete;
  // The head classifies each permuted token's true grid position, so the
  // label space is the full grid-index space.
  s.label_space = grid.num_patches;
  const auto& sel = s.permutation->selection.indices;
  const std::vector<int64_t> inv = s.permutation->inverse();
  s.target_labels.resize(sel.size());
  for (size_t slot = 0; slot < sel.size(); ++slot) {
    s.target_labels[slot] = sel[static_cast<size_t>(inv[slot])];
  }
  return s;
}

SSLSample make_ssl_sample(const Tensor& image, const PatchGrid& grid, const SSLTaskConfig& config,
                          Rng& rng) {
  switch (config.kind) {
    case SSLTaskKind::Reconstruction:
      return make_reconstruction(image, grid);
    case SSLTaskKind::MimContinuous:
      return make_mim_continuous(image, grid, config.ratio, rng);
    case SSLTaskKind::MimDiscrete:
      return make_mim_discrete(image, grid, config.ratio, config.tokenizer.get(), rng);
    case SSLTaskKind::JigsawContinuous:
      return make_jigsaw_continuous(image, grid, config.ratio, rng);
    case SSLTaskKind::JigsawDiscrete:
      return make_jigsaw_discrete(image, grid, config.ratio, rng);
  }
  throw ConfigError("make_ssl_sample: unknown task kind");
}

Tensor ssl_loss_mask(const SSLSample& sample, int64_t channels) {
  Tensor mask({channels, sample.grid.image_height, sample.grid.image_width});
  const Tensor ones({channels}, std::vector<double>(static_cast<size_t>(channels), 1.0));
  for (int64_t p : sample.loss_indices) {
    fill_patch(mask, sample.grid, p, ones);
  }
  return mask;
}

ad::Var ssl_loss_var(ad::Tape& tape, ad::Var prediction, const SSLSample& sample,
                     const PatchGrid& grid) {
  if (grid != sample.grid) {
    throw ShapeError("ssl_loss: grid does not match the sample's grid");
  }
  const Tensor& pred = tape.value(prediction);
  if (is_continuous(sample.kind)) {
    if (!pred.same_shape(sample.target_image)) {
      throw ShapeError("ssl_loss: prediction " + pred.shape_str() + " vs target " +
                       sample.target_image.shape_str());
    }
    return tape.masked_l1(prediction, sample.target_image, ssl_loss_mask(sample, pred.dim(0)));
  }
  if (pred.rank() != 2 || pred.dim(0) != grid.num_patches || pred.dim(1) != sample.label_space) {
    throw ShapeError("ssl_loss: prediction " + pred.shape_str() + " vs expected [" +
                     std::to_string(grid.num_patches) + ", " + std::to_string(sample.label_space) +
                     "]");
  }
  std::vector<int64_t> targets(static_cast<size_t>(grid.num_patches), -1);
  for (size_t i = 0; i < sample.loss_indices.size(); ++i) {
    targets[static_cast<size_t>(sample.loss_indices[i])] = sample.target_labels[i];
  }
  return tape.cross_entropy_rows(prediction, targets);
}

double ssl_loss(const Tensor& prediction, const SSLSample& sample, const PatchGrid& grid) {
  ad::Tape tape;
  return tape.value(ssl_loss_var(tape, tape.leaf(prediction), sample, grid)).scalar();
}

}  // namespace ssldetr
