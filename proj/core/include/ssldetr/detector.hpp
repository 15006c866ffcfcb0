#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssldetr/autodiff.hpp"
#include "ssldetr/detection_set.hpp"
#include "ssldetr/patchgrid.hpp"
#include "ssldetr/rng.hpp"
#include "ssldetr/ssl_tasks.hpp"
#include "ssldetr/tensor.hpp"

namespace ssldetr {

enum class BackboneKind {
  kConv,  // strided 3x3 conv stages, one per factor of two
  kStub,  // single f-strided average pooling; parameter-free, used to prove
          // patch/token alignment
};

struct BackboneConfig {
  int64_t downsampling_factor = 32;  // power of two
  int64_t feature_dim = 128;
  std::string pretrained_weights;  // optional checkpoint to load from
  BackboneKind kind = BackboneKind::kConv;
};

struct DetectorConfig {
  int64_t num_queries = 100;
  int64_t num_classes = 0;
  int64_t encoder_layers = 2;
  int64_t decoder_layers = 2;
  int64_t attention_heads = 4;
  int64_t hidden_dim = 128;
  int64_t ffn_dim = 256;
  int64_t image_size = 512;
};

// Task-prediction head attached to the encoder output tokens. The projection
// width is fixed at construction: continuous tasks predict 3*f*f pixels per
// token, JigsawDiscrete scores every grid position, MimDiscrete scores the
// tokenizer vocabulary.
struct SSLHeadConfig {
  SSLTaskKind task = SSLTaskKind::Reconstruction;
  int64_t vocab_size = 512;  // MimDiscrete only
};

// Encoder output with its spatial layout; token p corresponds to patch p in
// row-major grid order.
struct EncoderTokens {
  Tensor tokens;  // [num_patches, hidden_dim]
  PatchGrid grid;
};

// Fixed 2-D sinusoidal encoding, [num_patches, hidden_dim]; first half of
// each vector encodes the row coordinate, second half the column.
Tensor positional_encoding(const PatchGrid& grid, int64_t hidden_dim);

class DetrModel {
 public:
  DetrModel(DetectorConfig config, BackboneConfig backbone,
            std::optional<SSLHeadConfig> ssl_head, Rng& rng);

  const DetectorConfig& config() const { return config_; }
  const BackboneConfig& backbone_config() const { return backbone_; }
  const std::optional<SSLHeadConfig>& ssl_head_config() const { return ssl_head_; }

  // ---- tape-level forward passes (training) ----
  ad::Var backbone_forward(ad::Tape& tape, const Tensor& image) const;
  // features [C, H/f, W/f] -> tokens [P, hidden_dim]
  ad::Var encoder_forward(ad::Tape& tape, ad::Var features,
                          const PatchGrid& grid) const;
  ad::Var decoder_forward(ad::Tape& tape, ad::Var encoder_tokens,
                          const PatchGrid& grid) const;
  // decoded [num_queries, hidden] -> logits [nq, nc+1], boxes [nq, 4]
  std::pair<ad::Var, ad::Var> detection_heads(ad::Tape& tape,
                                              ad::Var decoded) const;
  ad::Var ssl_head_forward(ad::Tape& tape, ad::Var encoder_tokens,
                           const PatchGrid& grid, SSLTaskKind task) const;

  struct Forward {
    ad::Var encoder_tokens;
    ad::Var class_logits;
    ad::Var boxes;
    PatchGrid grid;
  };
  Forward forward(ad::Tape& tape, const Tensor& image) const;

  // ---- plain-value conveniences (evaluation) ----
  EncoderTokens encode(const Tensor& image) const;
  DetectionSet predict(const Tensor& image) const;

  // ---- parameters ----
  const std::vector<Parameter*>& parameters() const { return param_ptrs_; }
  Parameter* find_parameter(const std::string& name) const;
  std::map<std::string, Tensor> state() const;
  // Copies matching tensors into this model. strict=true requires an exact
  // name/shape correspondence; otherwise overlapping names are loaded and the
  // number of tensors applied is returned. Shape mismatch always throws.
  int64_t load_state(const std::map<std::string, Tensor>& state, bool strict);

  PatchGrid grid_for(const Tensor& image) const;
  int64_t ssl_output_dim() const;

 private:
  struct Attention {
    Parameter* wq;
    Parameter* bq;
    Parameter* wk;
    Parameter* bk;
    Parameter* wv;
    Parameter* bv;
    Parameter* wo;
    Parameter* bo;
  };
  struct LayerNormParams {
    Parameter* gamma;
    Parameter* beta;
  };
  struct Ffn {
    Parameter* w1;
    Parameter* b1;
    Parameter* w2;
    Parameter* b2;
  };
  struct EncoderLayer {
    Attention self_attn;
    LayerNormParams norm1;
    Ffn ffn;
    LayerNormParams norm2;
  };
  struct DecoderLayer {
    Attention self_attn;
    LayerNormParams norm1;
    Attention cross_attn;
    LayerNormParams norm2;
    Ffn ffn;
    LayerNormParams norm3;
  };

  Parameter* add_param(const std::string& name, Tensor value);
  Parameter* xavier(const std::string& name, int64_t fan_in, int64_t fan_out,
                    std::vector<int64_t> shape, Rng& rng);
  Attention make_attention(const std::string& prefix, Rng& rng);
  LayerNormParams make_norm(const std::string& prefix);
  Ffn make_ffn(const std::string& prefix, Rng& rng);

  ad::Var attention(ad::Tape& tape, const Attention& p, ad::Var q_in,
                    ad::Var k_in, ad::Var v_in) const;
  ad::Var layer_norm(ad::Tape& tape, const LayerNormParams& p, ad::Var x) const;
  ad::Var ffn_forward(ad::Tape& tape, const Ffn& p, ad::Var x) const;
  ad::Var linear(ad::Tape& tape, Parameter* w, Parameter* b, ad::Var x) const;

  DetectorConfig config_;
  BackboneConfig backbone_;
  std::optional<SSLHeadConfig> ssl_head_;

  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<Parameter*> param_ptrs_;
  std::map<std::string, Parameter*> by_name_;

  std::vector<std::pair<Parameter*, Parameter*>> conv_stages_;  // weight, bias
  Parameter* input_proj_w_ = nullptr;
  Parameter* input_proj_b_ = nullptr;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Parameter* query_embed_ = nullptr;
  Parameter* class_w_ = nullptr;
  Parameter* class_b_ = nullptr;
  Parameter* box_w1_ = nullptr;
  Parameter* box_b1_ = nullptr;
  Parameter* box_w2_ = nullptr;
  Parameter* box_b2_ = nullptr;
  Parameter* box_w3_ = nullptr;
  Parameter* box_b3_ = nullptr;
  Parameter* ssl_w_ = nullptr;
  Parameter* ssl_b_ = nullptr;
};

}  // namespace ssldetr
