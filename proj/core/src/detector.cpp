#include "ssldetr/detector.hpp"

#include <cmath>
#include <numbers>

#include "ssldetr/errors.hpp"

namespace ssldetr {

Tensor positional_encoding(const PatchGrid& grid, int64_t hidden_dim) {
  if (hidden_dim <= 0 || hidden_dim % 2 != 0) {
    throw ConfigError("positional_encoding: hidden_dim must be positive and "
                      "even, got " + std::to_string(hidden_dim));
  }
  const int64_t half = hidden_dim / 2;
  const double two_pi = 2.0 * std::numbers::pi;
  Tensor pe = Tensor::zeros({grid.num_patches, hidden_dim});
  for (int64_t p = 0; p < grid.num_patches; ++p) {
    const double y = (static_cast<double>(grid.row_of(p)) + 0.5) /
                     static_cast<double>(grid.rows) * two_pi;
    const double x = (static_cast<double>(grid.col_of(p)) + 0.5) /
                     static_cast<double>(grid.cols) * two_pi;
    for (int64_t j = 0; j < half; ++j) {
      const double freq =
          std::pow(10000.0, 2.0 * static_cast<double>(j / 2) / static_cast<double>(half));
      pe.at(p, j) = (j % 2 == 0) ? std::sin(y / freq) : std::cos(y / freq);
      pe.at(p, half + j) = (j % 2 == 0) ? std::sin(x / freq) : std::cos(x / freq);
    }
  }
  return pe;
}

namespace {

bool power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int64_t log2_exact(int64_t v) {
  int64_t k = 0;
  while ((int64_t{1} << k) < v) ++k;
  return k;
}

}  // namespace

DetrModel::DetrModel(DetectorConfig config, BackboneConfig backbone,
                     std::optional<SSLHeadConfig> ssl_head, Rng& rng)
    : config_(config), backbone_(backbone), ssl_head_(ssl_head) {
  if (!power_of_two(backbone_.downsampling_factor)) {
    throw ConfigError("backbone downsampling factor must be a power of two, got " +
                      std::to_string(backbone_.downsampling_factor));
  }
  if (backbone_.feature_dim < 1) {
    throw ConfigError("backbone feature_dim must be positive");
  }
  if (config_.num_classes < 1) {
    throw ConfigError("detector needs at least one object class");
  }
  if (config_.num_queries < 1) {
    throw ConfigError("detector needs at least one query");
  }
  if (config_.encoder_layers < 1 || config_.decoder_layers < 1) {
    throw ConfigError("encoder and decoder need at least one layer each");
  }
  if (config_.attention_heads < 1 ||
      config_.hidden_dim % config_.attention_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(config_.hidden_dim) +
                      " is not divisible by attention_heads " +
                      std::to_string(config_.attention_heads));
  }
  if (config_.hidden_dim % 2 != 0) {
    throw ConfigError("hidden_dim must be even for the sinusoidal encoding");
  }
  if (config_.ffn_dim < 1) {
    throw ConfigError("ffn_dim must be positive");
  }
  if (config_.image_size < backbone_.downsampling_factor ||
      config_.image_size % backbone_.downsampling_factor != 0) {
    throw ConfigError("image_size " + std::to_string(config_.image_size) +
                      " is not a positive multiple of the downsampling factor " +
                      std::to_string(backbone_.downsampling_factor));
  }

  const int64_t f = backbone_.downsampling_factor;
  const int64_t hidden = config_.hidden_dim;

  int64_t backbone_out = 3;
  if (backbone_.kind == BackboneKind::kConv) {
    const int64_t stages = log2_exact(f);
    int64_t in_ch = 3;
    if (stages == 0) {
      Parameter* w = xavier("backbone.conv0.weight", in_ch * 9,
                            backbone_.feature_dim * 9,
                            {backbone_.feature_dim, in_ch, 3, 3}, rng);
      Parameter* b = add_param("backbone.conv0.bias",
                               Tensor::zeros({backbone_.feature_dim}));
      conv_stages_.emplace_back(w, b);
    } else {
      for (int64_t i = 0; i < stages; ++i) {
        const int64_t out_ch = (i == stages - 1)
                                   ? backbone_.feature_dim
                                   : std::min<int64_t>(backbone_.feature_dim,
                                                       int64_t{8} << i);
        const std::string prefix = "backbone.conv" + std::to_string(i);
        Parameter* w = xavier(prefix + ".weight", in_ch * 9, out_ch * 9,
                              {out_ch, in_ch, 3, 3}, rng);
        Parameter* b = add_param(prefix + ".bias", Tensor::zeros({out_ch}));
        conv_stages_.emplace_back(w, b);
        in_ch = out_ch;
      }
    }
    backbone_out = backbone_.feature_dim;
  }

  input_proj_w_ = xavier("input_proj.weight", backbone_out, hidden,
                         {backbone_out, hidden}, rng);
  input_proj_b_ = add_param("input_proj.bias", Tensor::zeros({hidden}));

  for (int64_t l = 0; l < config_.encoder_layers; ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.self_attn = make_attention(prefix + ".self_attn", rng);
    layer.norm1 = make_norm(prefix + ".norm1");
    layer.ffn = make_ffn(prefix + ".ffn", rng);
    layer.norm2 = make_norm(prefix + ".norm2");
    encoder_.push_back(layer);
  }

  for (int64_t l = 0; l < config_.decoder_layers; ++l) {
    const std::string prefix = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = make_attention(prefix + ".self_attn", rng);
    layer.norm1 = make_norm(prefix + ".norm1");
    layer.cross_attn = make_attention(prefix + ".cross_attn", rng);
    layer.norm2 = make_norm(prefix + ".norm2");
    layer.ffn = make_ffn(prefix + ".ffn", rng);
    layer.norm3 = make_norm(prefix + ".norm3");
    decoder_.push_back(layer);
  }

  Tensor qe = Tensor::zeros({config_.num_queries, hidden});
  for (int64_t i = 0; i < qe.numel(); ++i) qe[i] = rng.normal();
  query_embed_ = add_param("query_embed.weight", std::move(qe));

  class_w_ = xavier("class_head.weight", hidden, config_.num_classes + 1,
                    {hidden, config_.num_classes + 1}, rng);
  class_b_ = add_param("class_head.bias", Tensor::zeros({config_.num_classes + 1}));

  box_w1_ = xavier("box_head.w1", hidden, hidden, {hidden, hidden}, rng);
  box_b1_ = add_param("box_head.b1", Tensor::zeros({hidden}));
  box_w2_ = xavier("box_head.w2", hidden, hidden, {hidden, hidden}, rng);
  box_b2_ = add_param("box_head.b2", Tensor::zeros({hidden}));
  box_w3_ = xavier("box_head.w3", hidden, 4, {hidden, 4}, rng);
  box_b3_ = add_param("box_head.b3", Tensor::zeros({4}));

  if (ssl_head_) {
    if (ssl_head_->task == SSLTaskKind::MimDiscrete && ssl_head_->vocab_size < 2) {
      throw ConfigError("MimDiscrete head needs a vocabulary of at least 2");
    }
    const int64_t out_dim = ssl_output_dim();
    ssl_w_ = xavier("ssl_head.weight", hidden, out_dim, {hidden, out_dim}, rng);
    ssl_b_ = add_param("ssl_head.bias", Tensor::zeros({out_dim}));
  }
}

int64_t DetrModel::ssl_output_dim() const {
  if (!ssl_head_) {
    throw ConfigError("model was built without an SSL head");
  }
  const int64_t f = backbone_.downsampling_factor;
  switch (ssl_head_->task) {
    case SSLTaskKind::Reconstruction:
    case SSLTaskKind::MimContinuous:
    case SSLTaskKind::JigsawContinuous:
      return 3 * f * f;
    case SSLTaskKind::MimDiscrete:
      return ssl_head_->vocab_size;
    case SSLTaskKind::JigsawDiscrete: {
      const int64_t side = config_.image_size / f;
      return side * side;
    }
  }
  throw ConfigError("unknown SSL task kind");
}

Parameter* DetrModel::add_param(const std::string& name, Tensor value) {
  params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
  Parameter* p = params_.back().get();
  param_ptrs_.push_back(p);
  by_name_[name] = p;
  return p;
}

Parameter* DetrModel::xavier(const std::string& name, int64_t fan_in,
                             int64_t fan_out, std::vector<int64_t> shape,
                             Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (int64_t i = 0; i < t.numel(); ++i) {
    t[i] = (2.0 * rng.uniform() - 1.0) * limit;
  }
  return add_param(name, std::move(t));
}

DetrModel::Attention DetrModel::make_attention(const std::string& prefix, Rng& rng) {
  const int64_t h = config_.hidden_dim;
  Attention a;
  a.wq = xavier(prefix + ".wq", h, h, {h, h}, rng);
  a.bq = add_param(prefix + ".bq", Tensor::zeros({h}));
  a.wk = xavier(prefix + ".wk", h, h, {h, h}, rng);
  a.bk = add_param(prefix + ".bk", Tensor::zeros({h}));
  a.wv = xavier(prefix + ".wv", h, h, {h, h}, rng);
  a.bv = add_param(prefix + ".bv", Tensor::zeros({h}));
  a.wo = xavier(prefix + ".wo", h, h, {h, h}, rng);
  a.bo = add_param(prefix + ".bo", Tensor::zeros({h}));
  return a;
}

DetrModel::LayerNormParams DetrModel::make_norm(const std::string& prefix) {
  LayerNormParams n;
  n.gamma = add_param(prefix + ".gamma", Tensor::full({config_.hidden_dim}, 1.0));
  n.beta = add_param(prefix + ".beta", Tensor::zeros({config_.hidden_dim}));
  return n;
}

DetrModel::Ffn DetrModel::make_ffn(const std::string& prefix, Rng& rng) {
  const int64_t h = config_.hidden_dim;
  const int64_t m = config_.ffn_dim;
  Ffn f;
  f.w1 = xavier(prefix + ".w1", h, m, {h, m}, rng);
  f.b1 = add_param(prefix + ".b1", Tensor::zeros({m}));
  f.w2 = xavier(prefix + ".w2", m, h, {m, h}, rng);
  f.b2 = add_param(prefix + ".b2", Tensor::zeros({h}));
  return f;
}

ad::Var DetrModel::linear(ad::Tape& tape, Parameter* w, Parameter* b,
                          ad::Var x) const {
  return tape.add_row_broadcast(tape.matmul(x, tape.param(*w)), tape.param(*b));
}

ad::Var DetrModel::attention(ad::Tape& tape, const Attention& p, ad::Var q_in,
                             ad::Var k_in, ad::Var v_in) const {
  const int64_t heads = config_.attention_heads;
  const int64_t dh = config_.hidden_dim / heads;
  ad::Var q = linear(tape, p.wq, p.bq, q_in);
  ad::Var k = linear(tape, p.wk, p.bk, k_in);
  ad::Var v = linear(tape, p.wv, p.bv, v_in);
  std::vector<ad::Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t h = 0; h < heads; ++h) {
    ad::Var qh = tape.slice_cols(q, h * dh, dh);
    ad::Var kh = tape.slice_cols(k, h * dh, dh);
    ad::Var vh = tape.slice_cols(v, h * dh, dh);
    ad::Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
    outs.push_back(tape.matmul(tape.softmax_rows(scores), vh));
  }
  ad::Var merged = heads == 1 ? outs[0] : tape.concat_cols(outs);
  return linear(tape, p.wo, p.bo, merged);
}

ad::Var DetrModel::layer_norm(ad::Tape& tape, const LayerNormParams& p,
                              ad::Var x) const {
  return tape.layer_norm_rows(x, tape.param(*p.gamma), tape.param(*p.beta));
}

ad::Var DetrModel::ffn_forward(ad::Tape& tape, const Ffn& p, ad::Var x) const {
  return linear(tape, p.w2, p.b2, tape.gelu(linear(tape, p.w1, p.b1, x)));
}

PatchGrid DetrModel::grid_for(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("expected a [3, H, W] image, got " + image.shape_str());
  }
  return compute_grid(image.dim(1), image.dim(2), backbone_.downsampling_factor);
}

ad::Var DetrModel::backbone_forward(ad::Tape& tape, const Tensor& image) const {
  grid_for(image);  // validates shape and divisibility
  ad::Var x = tape.leaf(image);
  if (backbone_.kind == BackboneKind::kStub) {
    if (backbone_.downsampling_factor == 1) return x;
    return tape.avg_pool(x, backbone_.downsampling_factor);
  }
  const int64_t stride = backbone_.downsampling_factor == 1 ? 1 : 2;
  for (const auto& [w, b] : conv_stages_) {
    x = tape.gelu(tape.conv2d(x, tape.param(*w), tape.param(*b), stride, 1));
  }
  return x;
}

ad::Var DetrModel::encoder_forward(ad::Tape& tape, ad::Var features,
                                   const PatchGrid& grid) const {
  const Tensor& fv = tape.value(features);
  if (fv.rank() != 3 || fv.dim(1) != grid.rows || fv.dim(2) != grid.cols) {
    throw ShapeError("encoder_forward: feature map " + fv.shape_str() +
                     " does not cover a " + std::to_string(grid.rows) + "x" +
                     std::to_string(grid.cols) + " grid");
  }
  const int64_t channels = fv.dim(0);
  if (input_proj_w_->value.dim(0) != channels) {
    throw ShapeError("encoder_forward: projection expects " +
                     std::to_string(input_proj_w_->value.dim(0)) +
                     " channels, feature map has " + std::to_string(channels));
  }
  // [C, rows, cols] -> [P, C]
  ad::Var tokens = tape.transpose(
      tape.reshape(features, {channels, grid.num_patches}));
  ad::Var x = tape.add_row_broadcast(
      tape.matmul(tokens, tape.param(*input_proj_w_)),
      tape.param(*input_proj_b_));

  ad::Var pos = tape.leaf(positional_encoding(grid, config_.hidden_dim));
  for (const auto& layer : encoder_) {
    ad::Var qk = tape.add(x, pos);
    ad::Var attn = attention(tape, layer.self_attn, qk, qk, x);
    x = layer_norm(tape, layer.norm1, tape.add(x, attn));
    ad::Var f = ffn_forward(tape, layer.ffn, x);
    x = layer_norm(tape, layer.norm2, tape.add(x, f));
  }
  return x;
}

ad::Var DetrModel::decoder_forward(ad::Tape& tape, ad::Var encoder_tokens,
                                   const PatchGrid& grid) const {
  const Tensor& mv = tape.value(encoder_tokens);
  if (mv.rank() != 2 || mv.dim(0) != grid.num_patches ||
      mv.dim(1) != config_.hidden_dim) {
    throw ShapeError("decoder_forward: encoder tokens " + mv.shape_str() +
                     " do not match the grid/hidden size");
  }
  ad::Var pos = tape.leaf(positional_encoding(grid, config_.hidden_dim));
  ad::Var mem_k = tape.add(encoder_tokens, pos);
  ad::Var qe = tape.param(*query_embed_);
  ad::Var tgt = tape.leaf(Tensor::zeros({config_.num_queries, config_.hidden_dim}));
  for (const auto& layer : decoder_) {
    ad::Var qk = tape.add(tgt, qe);
    ad::Var attn = attention(tape, layer.self_attn, qk, qk, tgt);
    tgt = layer_norm(tape, layer.norm1, tape.add(tgt, attn));
    ad::Var q2 = tape.add(tgt, qe);
    ad::Var cross = attention(tape, layer.cross_attn, q2, mem_k, encoder_tokens);
    tgt = layer_norm(tape, layer.norm2, tape.add(tgt, cross));
    ad::Var f = ffn_forward(tape, layer.ffn, tgt);
    tgt = layer_norm(tape, layer.norm3, tape.add(tgt, f));
  }
  return tgt;
}

std::pair<ad::Var, ad::Var> DetrModel::detection_heads(ad::Tape& tape,
                                                       ad::Var decoded) const {
  ad::Var logits = linear(tape, class_w_, class_b_, decoded);
  ad::Var h1 = tape.relu(linear(tape, box_w1_, box_b1_, decoded));
  ad::Var h2 = tape.relu(linear(tape, box_w2_, box_b2_, h1));
  ad::Var boxes = tape.sigmoid(linear(tape, box_w3_, box_b3_, h2));
  return {logits, boxes};
}

ad::Var DetrModel::ssl_head_forward(ad::Tape& tape, ad::Var encoder_tokens,
                                    const PatchGrid& grid,
                                    SSLTaskKind task) const {
  if (!ssl_head_) {
    throw ConfigError("model was built without an SSL head, cannot run " +
                      std::string(to_string(task)));
  }
  if (ssl_head_->task != task) {
    throw ConfigError("SSL head is configured for " +
                      std::string(to_string(ssl_head_->task)) +
                      ", requested " + std::string(to_string(task)));
  }
  const Tensor& tv = tape.value(encoder_tokens);
  if (tv.rank() != 2 || tv.dim(0) != grid.num_patches) {
    throw ShapeError("ssl_head_forward: tokens " + tv.shape_str() +
                     " do not match the grid's " +
                     std::to_string(grid.num_patches) + " patches");
  }
  if (grid.patch_size != backbone_.downsampling_factor) {
    throw ConfigError("ssl_head_forward: grid patch size " +
                      std::to_string(grid.patch_size) +
                      " differs from the downsampling factor");
  }
  ad::Var proj = linear(tape, ssl_w_, ssl_b_, encoder_tokens);

  if (!is_continuous(task)) {
    if (task == SSLTaskKind::JigsawDiscrete &&
        ssl_output_dim() != grid.num_patches) {
      throw ConfigError("JigsawDiscrete head scores " +
                        std::to_string(ssl_output_dim()) +
                        " positions but the grid has " +
                        std::to_string(grid.num_patches));
    }
    return proj;
  }

  // Per-token pixel predictions, reassembled into a [3, H, W] image.
  const int64_t f = grid.patch_size;
  const int64_t h = grid.image_height;
  const int64_t w = grid.image_width;
  std::vector<int64_t> index_map(static_cast<size_t>(3 * h * w));
  int64_t o = 0;
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int64_t p = (y / f) * grid.cols + (x / f);
        const int64_t col = (c * f + (y % f)) * f + (x % f);
        index_map[static_cast<size_t>(o++)] = p * (3 * f * f) + col;
      }
    }
  }
  return tape.permute_gather(proj, std::move(index_map), {3, h, w});
}

DetrModel::Forward DetrModel::forward(ad::Tape& tape, const Tensor& image) const {
  Forward out;
  out.grid = grid_for(image);
  ad::Var features = backbone_forward(tape, image);
  out.encoder_tokens = encoder_forward(tape, features, out.grid);
  ad::Var decoded = decoder_forward(tape, out.encoder_tokens, out.grid);
  auto [logits, boxes] = detection_heads(tape, decoded);
  out.class_logits = logits;
  out.boxes = boxes;
  return out;
}

EncoderTokens DetrModel::encode(const Tensor& image) const {
  ad::Tape tape;
  PatchGrid grid = grid_for(image);
  ad::Var features = backbone_forward(tape, image);
  ad::Var tokens = encoder_forward(tape, features, grid);
  return {tape.value(tokens), grid};
}

DetectionSet DetrModel::predict(const Tensor& image) const {
  ad::Tape tape;
  Forward f = forward(tape, image);
  return {tape.value(f.class_logits), tape.value(f.boxes)};
}

Parameter* DetrModel::find_parameter(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

std::map<std::string, Tensor> DetrModel::state() const {
  std::map<std::string, Tensor> out;
  for (const Parameter* p : param_ptrs_) out.emplace(p->name, p->value);
  return out;
}

int64_t DetrModel::load_state(const std::map<std::string, Tensor>& state,
                              bool strict) {
  if (strict) {
    if (state.size() != param_ptrs_.size()) {
      throw ContractError("load_state: checkpoint has " +
                          std::to_string(state.size()) + " tensors, model has " +
                          std::to_string(param_ptrs_.size()));
    }
    for (const Parameter* p : param_ptrs_) {
      if (!state.count(p->name)) {
        throw ContractError("load_state: checkpoint is missing \"" + p->name + "\"");
      }
    }
  }
  int64_t loaded = 0;
  for (Parameter* p : param_ptrs_) {
    auto it = state.find(p->name);
    if (it == state.end()) continue;
    if (!it->second.same_shape(p->value)) {
      throw ShapeError("load_state: \"" + p->name + "\" has shape " +
                       p->value.shape_str() + ", checkpoint provides " +
                       it->second.shape_str());
    }
    p->value = it->second;
    ++loaded;
  }
  return loaded;
}

}  // namespace ssldetr
