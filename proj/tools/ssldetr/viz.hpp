#pragma once

#include <vector>

#include "ssldetr/detector.hpp"
#include "ssldetr/ssl_tasks.hpp"

namespace ssldetr {

struct SSLPanels {
  Tensor original;    // the clean [0,1] image
  Tensor input;       // transformed image the network saw
  Tensor prediction;  // rendered model output
};

// Runs the model's SSL head on one [0,1] image and renders the three
// comparison panels. Continuous tasks show the predicted pixels clamped to
// [0,1]; JigsawDiscrete paints each patch by its predicted original position
// (a position heat map); MimDiscrete paints each patch with the predicted
// color-bin center.
SSLPanels render_ssl_panels(const DetrModel& model, const Tensor& image01,
                            const SSLTaskConfig& task, Rng& rng);

// Side-by-side composition with a white gutter between panels.
Tensor hstack_panels(const std::vector<Tensor>& panels, int64_t gap = 2);

}  // namespace ssldetr
