#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oneref/autodiff.hpp"
#include "oneref/nn_ops.hpp"
#include "oneref/param_store.hpp"

namespace oneref {

// One-tower multiway transformer configuration. The nine serialized keys are
// exactly: layers, dim, heads, vl_expert_layers, image_size, patch, vocab,
// codebook, max_text_len.
struct ModelConfig {
  int layers = 4;
  int dim = 64;
  int heads = 4;
  int vl_expert_layers = 1;  // top layers routed to the vision-language expert
  int image_size = 96;
  int patch = 16;
  int vocab = 0;
  int codebook = 64;
  int max_text_len = 16;
  double sim_scale = 5.0;  // logit scale of sigmoid similarity masks (kept in store state)

  int grid_side() const { return image_size / patch; }
  int n_patches() const { return grid_side() * grid_side(); }
  int seq_img() const { return 1 + n_patches(); }  // CLS + patches
  int seq_total() const { return seq_img() + max_text_len; }

  void validate() const;
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
};

// Shared-attention encoder with modality-expert feed-forwards plus every
// prediction head. Parameters live in the supplied store; one store holds at
// most one model.
class OneRefModel {
 public:
  OneRefModel(const ModelConfig& cfg, ParamStore& store);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() const { return *store_; }
  double sim_scale() const;

  struct Encoded {
    ValuePtr visual;  // [B*N_v, D]
    ValuePtr text;    // [B*S_txt, D]; position 0 is SEP
    ValuePtr e_cls;   // [B, D]
    ValuePtr e_sep;   // [B, D]
    int64_t batch = 0;
  };

  // patches: [B*N_v, P*P*3]; text_ids: length B*S_txt (SEP/.../EOS/pad).
  // Masks (1 = masked) may be empty for the pure inference path; masked
  // positions are replaced by the shared modality mask embedding before
  // encoding. Padding is excluded from attention.
  Encoded encode_pair(const Tensor& patches, const std::vector<int64_t>& text_ids,
                      const std::vector<uint8_t>& img_mask = {},
                      const std::vector<uint8_t>& txt_mask = {}) const;

  struct EncodedImage {
    ValuePtr e_cls;   // [B, D]
    ValuePtr tokens;  // [B*N_v, D]
    int64_t batch = 0;
  };
  EncodedImage encode_image_only(const Tensor& patches) const;

  struct EncodedText {
    ValuePtr e_sep;   // [B, D]
    ValuePtr tokens;  // [B*S_txt, D]
    int64_t batch = 0;
  };
  EncodedText encode_text_only(const std::vector<int64_t>& text_ids) const;

  // Visual-token logits over the codebook from x_i (.) e_SEP (or plain x_i
  // for the no-referring baseline).
  ValuePtr mim_head(const Encoded& enc, bool referring = true) const;
  // Word logits over the vocabulary from w_i (.) e_CLS.
  ValuePtr mlm_head(const Encoded& enc, bool referring = true) const;
  // 3-layer MLP to (dx, dy, pw, ph); pw/ph pass through softplus.
  ValuePtr visual_relation_head(const Encoded& enc) const;
  // 3-layer MLP + softmax over positions; valid_additive_mask is [B, S_txt]
  // with 0 at real word positions and a large negative value elsewhere.
  ValuePtr semantic_relation_head(const Encoded& enc, const Tensor& valid_additive_mask) const;

  struct RecOutput {
    ValuePtr boxes;        // [B, 4] center format in (0,1) via sigmoid
    ValuePtr sim_softmax;  // [B, N_v]
    ValuePtr sim_sigmoid;  // [B, N_v]
  };
  RecOutput rec_head(const Encoded& enc) const;

  // Segmentation probabilities [B, H*W]: 3-layer deconvolution to H/2 x W/2,
  // cosine against the projected text aggregate, bilinear x2, sigmoid.
  ValuePtr res_head(const Encoded& enc) const;

 private:
  enum class Mode { kPair, kImageOnly, kTextOnly };

  ValuePtr encoder(const ValuePtr& x, int64_t batch, int64_t seq,
                   const std::vector<uint8_t>& key_keep, const std::vector<uint8_t>& is_image) const;
  ValuePtr expert_ffn(const ValuePtr& x, const std::string& which, int layer) const;
  ValuePtr mlp3(const ValuePtr& x, const std::string& prefix, int64_t out_dim) const;
  ValuePtr masked_replace(const ValuePtr& x, const std::vector<uint8_t>& mask,
                          const ValuePtr& mask_embed) const;

  ModelConfig cfg_;
  ParamStore* store_;
  std::vector<int> deconv_ch_;
  std::vector<TConvPlan> deconv_plans_;
};

}  // namespace oneref
