#include "viz.hpp"

#include <algorithm>
#include <cmath>

#include "ssldetr/data.hpp"
#include "ssldetr/errors.hpp"

namespace ssldetr {

namespace {

Tensor clamp01(Tensor t) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
  return t;
}

void fill_patch(Tensor& image, const PatchGrid& grid, int64_t patch, double r,
                double g, double b) {
  const int64_t f = grid.patch_size;
  const int64_t y0 = grid.row_of(patch) * f;
  const int64_t x0 = grid.col_of(patch) * f;
  const double rgb[3] = {r, g, b};
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = y0; y < y0 + f; ++y) {
      for (int64_t x = x0; x < x0 + f; ++x) {
        image.at(c, y, x) = rgb[c];
      }
    }
  }
}

std::vector<int64_t> argmax_rows(const Tensor& logits) {
  const int64_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int64_t> out(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = logits.data() + i * cols;
    out[static_cast<size_t>(i)] =
        std::max_element(row, row + cols) - row;
  }
  return out;
}

// Blue-to-red ramp over [0,1].
void position_color(double v, double* r, double* g, double* b) {
  *r = v;
  *g = 1.0 - std::abs(2.0 * v - 1.0);
  *b = 1.0 - v;
}

}  // namespace

SSLPanels render_ssl_panels(const DetrModel& model, const Tensor& image01,
                            const SSLTaskConfig& task, Rng& rng) {
  const auto& head = model.ssl_head_config();
  if (!head || head->task != task.kind) {
    throw ContractError(std::string("checkpoint has no SSL head for task ") +
                        to_string(task.kind));
  }
  const PatchGrid grid = model.grid_for(image01);
  const SSLSample sample = make_ssl_sample(image01, grid, task, rng);

  ad::Tape tape;
  ad::Var features = model.backbone_forward(tape, normalize_input(sample.input_image));
  ad::Var tokens = model.encoder_forward(tape, features, grid);
  ad::Var pred = model.ssl_head_forward(tape, tokens, grid, task.kind);
  const Tensor value = tape.value(pred);

  SSLPanels panels;
  panels.original = image01;
  panels.input = sample.input_image;
  if (is_continuous(task.kind)) {
    panels.prediction = clamp01(value);
    return panels;
  }

  Tensor canvas = Tensor::zeros(image01.shape());
  const std::vector<int64_t> labels = argmax_rows(value);
  if (task.kind == SSLTaskKind::JigsawDiscrete) {
    const double span = grid.num_patches > 1
                            ? static_cast<double>(grid.num_patches - 1)
                            : 1.0;
    for (int64_t p = 0; p < grid.num_patches; ++p) {
      double r, g, b;
      position_color(static_cast<double>(labels[static_cast<size_t>(p)]) / span,
                     &r, &g, &b);
      fill_patch(canvas, grid, p, r, g, b);
    }
  } else {  // MimDiscrete: invert the mean-color quantizer's cell layout
    const int64_t vocab = head->vocab_size;
    const int64_t bins = std::max<int64_t>(
        1, static_cast<int64_t>(std::floor(std::pow(static_cast<double>(vocab) + 1e-9,
                                                    1.0 / 3.0))));
    for (int64_t p = 0; p < grid.num_patches; ++p) {
      const int64_t id = labels[static_cast<size_t>(p)];
      const int64_t rb = (id / (bins * bins)) % bins;
      const int64_t gb = (id / bins) % bins;
      const int64_t bb = id % bins;
      fill_patch(canvas, grid, p,
                 (static_cast<double>(rb) + 0.5) / static_cast<double>(bins),
                 (static_cast<double>(gb) + 0.5) / static_cast<double>(bins),
                 (static_cast<double>(bb) + 0.5) / static_cast<double>(bins));
    }
  }
  panels.prediction = canvas;
  return panels;
}

Tensor hstack_panels(const std::vector<Tensor>& panels, int64_t gap) {
  if (panels.empty()) throw ContractError("hstack_panels: no panels");
  const int64_t h = panels[0].dim(1);
  const int64_t w = panels[0].dim(2);
  for (const Tensor& p : panels) {
    if (p.rank() != 3 || p.dim(0) != 3 || p.dim(1) != h || p.dim(2) != w) {
      throw ShapeError("hstack_panels: panels must share one [3, H, W] shape");
    }
  }
  const int64_t n = static_cast<int64_t>(panels.size());
  const int64_t out_w = n * w + gap * (n - 1);
  Tensor out({3, h, out_w});
  out.fill(1.0);
  for (int64_t k = 0; k < n; ++k) {
    const int64_t x0 = k * (w + gap);
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          out.at(c, y, x0 + x) = panels[static_cast<size_t>(k)].at(c, y, x);
        }
      }
    }
  }
  return out;
}

}  // namespace ssldetr
