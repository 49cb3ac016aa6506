#include "oneref/model.hpp"

#include <cmath>
#include <sstream>

#include "oneref/error.hpp"

namespace oneref {

void ModelConfig::validate() const {
  if (dim <= 0 || heads <= 0 || dim % heads != 0)
    fail("ShapeMismatch", "dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
  if (layers <= 0 || vl_expert_layers < 0 || vl_expert_layers > layers)
    fail("ShapeMismatch", "vl_expert_layers " + std::to_string(vl_expert_layers) + " vs layers " +
                              std::to_string(layers));
  if (patch <= 0 || image_size % patch != 0)
    fail("BadImageShape", "image_size " + std::to_string(image_size) + " vs patch " +
                              std::to_string(patch));
  if (vocab < 5) fail("ShapeMismatch", "vocab must include the special tokens");
  if (max_text_len < 2) fail("ShapeMismatch", "max_text_len must fit SEP and EOS");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "layers=" << layers << "\n";
  os << "dim=" << dim << "\n";
  os << "heads=" << heads << "\n";
  os << "vl_expert_layers=" << vl_expert_layers << "\n";
  os << "image_size=" << image_size << "\n";
  os << "patch=" << patch << "\n";
  os << "vocab=" << vocab << "\n";
  os << "codebook=" << codebook << "\n";
  os << "max_text_len=" << max_text_len << "\n";
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("ParseError", "bad model config line: " + line);
    const std::string key = line.substr(0, eq);
    const int value = std::stoi(line.substr(eq + 1));
    if (key == "layers") cfg.layers = value;
    else if (key == "dim") cfg.dim = value;
    else if (key == "heads") cfg.heads = value;
    else if (key == "vl_expert_layers") cfg.vl_expert_layers = value;
    else if (key == "image_size") cfg.image_size = value;
    else if (key == "patch") cfg.patch = value;
    else if (key == "vocab") cfg.vocab = value;
    else if (key == "codebook") cfg.codebook = value;
    else if (key == "max_text_len") cfg.max_text_len = value;
    else fail("ParseError", "unknown model config key: " + key);
  }
  return cfg;
}

OneRefModel::OneRefModel(const ModelConfig& cfg, ParamStore& store) : cfg_(cfg), store_(&store) {
  cfg_.validate();
  const int64_t d = cfg_.dim;
  const int64_t n_v = cfg_.n_patches();
  const int64_t s_txt = cfg_.max_text_len;

  store.param("vis/patch_w", int64_t(cfg_.patch) * cfg_.patch * 3, d);
  store.param("vis/patch_b", 1, d, /*zero_init=*/true);
  store.param("vis/pos", n_v, d);
  store.param("vis/cls", 1, d);
  store.param("vis/mask", 1, d);
  store.param("txt/emb", cfg_.vocab, d);
  store.param("txt/pos", s_txt, d);
  store.param("txt/mask", 1, d);

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "enc/L" + std::to_string(l) + "/";
    store.param(p + "ln1_g", 1, d)->data.data.setOnes();
    store.param(p + "ln1_b", 1, d, true);
    store.param(p + "qkv_w", d, 3 * d);
    store.param(p + "qkv_b", 1, 3 * d, true);
    store.param(p + "attn_out_w", d, d);
    store.param(p + "attn_out_b", 1, d, true);
    store.param(p + "ln2_g", 1, d)->data.data.setOnes();
    store.param(p + "ln2_b", 1, d, true);
    const bool vl = l >= cfg_.layers - cfg_.vl_expert_layers;
    for (const char* which : vl ? std::vector<const char*>{"vl"} : std::vector<const char*>{"v", "l"}) {
      const std::string e = p + "ffn_" + which + "/";
      store.param(e + "w1", d, 4 * d);
      store.param(e + "b1", 1, 4 * d, true);
      store.param(e + "w2", 4 * d, d);
      store.param(e + "b2", 1, d, true);
    }
  }
  store.param("enc/final_ln_g", 1, d)->data.data.setOnes();
  store.param("enc/final_ln_b", 1, d, true);

  store.param("head/mim_w", d, cfg_.codebook);
  store.param("head/mim_b", 1, cfg_.codebook, true);
  store.param("head/mlm_w", d, cfg_.vocab);
  store.param("head/mlm_b", 1, cfg_.vocab, true);
  for (const char* h : {"visrel", "semrel", "rec_inner", "rec_out"}) {
    const std::string p = std::string("head/") + h + "/";
    const int64_t out = std::string(h) == "visrel" ? 4 : (std::string(h) == "semrel" ? 1 : (std::string(h) == "rec_out" ? 4 : d));
    store.param(p + "w1", d, d);
    store.param(p + "b1", 1, d, true);
    store.param(p + "w2", d, d);
    store.param(p + "b2", 1, d, true);
    store.param(p + "w3", d, out);
    store.param(p + "b3", 1, out, true);
  }

  // Deconvolution stack: doubles the spatial side until image_size/2 is
  // reached, same-size 3x3 layers afterwards. Channels shrink to D/2, D/4.
  deconv_ch_ = {cfg_.dim, std::max(4, cfg_.dim / 2), std::max(2, cfg_.dim / 4),
                std::max(2, cfg_.dim / 4)};
  int side = cfg_.grid_side();
  const int target = cfg_.image_size / 2;
  for (int i = 0; i < 3; ++i) {
    const bool grow = side < target;
    const int kernel = grow ? 4 : 3;
    const int stride = grow ? 2 : 1;
    deconv_plans_.push_back(make_tconv_plan(side, side, kernel, stride, 1));
    side = static_cast<int>(deconv_plans_.back().out_h);
    const std::string p = "head/res/deconv" + std::to_string(i) + "_";
    store.param(p + "w", deconv_ch_[i], int64_t(kernel) * kernel * deconv_ch_[i + 1]);
    store.param(p + "b", 1, deconv_ch_[i + 1], true);
  }
  if (side != target)
    fail("BadImageShape", "deconvolution stack reaches " + std::to_string(side) + " instead of " +
                              std::to_string(target));
  store.param("head/res/txt_w", d, deconv_ch_.back());
  store.param("head/res/txt_b", 1, deconv_ch_.back(), true);

  auto scale_state = store.state("_cfg/sim_scale", 1, 1);
  if (scale_state->data.data[0] == 0.0) scale_state->data.data[0] = cfg_.sim_scale;
}

double OneRefModel::sim_scale() const { return store_->get("_cfg/sim_scale")->data.data[0]; }

ValuePtr OneRefModel::masked_replace(const ValuePtr& x, const std::vector<uint8_t>& mask,
                                     const ValuePtr& mask_embed) const {
  if (mask.empty()) return x;
  if (static_cast<int64_t>(mask.size()) != x->rows())
    fail("ShapeMismatch", "mask plan of " + std::to_string(mask.size()) + " for " +
                              x->data.shape_str());
  Tensor keep(x->rows(), 1), masked(x->rows(), 1);
  for (int64_t i = 0; i < x->rows(); ++i) {
    keep.data[i] = mask[i] ? 0.0 : 1.0;
    masked.data[i] = mask[i] ? 1.0 : 0.0;
  }
  auto kept = mul_colvec(x, constant(keep));
  auto fill = matmul(constant(masked), mask_embed);  // outer product [n,1]x[1,D]
  return add(kept, fill);
}

ValuePtr OneRefModel::expert_ffn(const ValuePtr& x, const std::string& which, int layer) const {
  const std::string p = "enc/L" + std::to_string(layer) + "/ffn_" + which + "/";
  auto h = add_rowvec(matmul(x, store_->get(p + "w1")), store_->get(p + "b1"));
  h = gelu(h);
  return add_rowvec(matmul(h, store_->get(p + "w2")), store_->get(p + "b2"));
}

ValuePtr OneRefModel::mlp3(const ValuePtr& x, const std::string& prefix, int64_t /*out_dim*/) const {
  const std::string p = "head/" + prefix + "/";
  auto h = gelu(add_rowvec(matmul(x, store_->get(p + "w1")), store_->get(p + "b1")));
  h = gelu(add_rowvec(matmul(h, store_->get(p + "w2")), store_->get(p + "b2")));
  return add_rowvec(matmul(h, store_->get(p + "w3")), store_->get(p + "b3"));
}

ValuePtr OneRefModel::encoder(const ValuePtr& x_in, int64_t batch, int64_t seq,
                              const std::vector<uint8_t>& key_keep,
                              const std::vector<uint8_t>& is_image) const {
  ValuePtr x = x_in;
  // Routing index lists are shared across layers.
  std::vector<int64_t> img_idx, txt_idx;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t s = 0; s < seq; ++s)
      (is_image[s] ? img_idx : txt_idx).push_back(b * seq + s);

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "enc/L" + std::to_string(l) + "/";
    auto normed = layernorm_rows(x, store_->get(p + "ln1_g"), store_->get(p + "ln1_b"));
    auto qkv = add_rowvec(matmul(normed, store_->get(p + "qkv_w")), store_->get(p + "qkv_b"));
    auto q = slice_cols(qkv, 0, cfg_.dim);
    auto k = slice_cols(qkv, cfg_.dim, 2 * cfg_.dim);
    auto v = slice_cols(qkv, 2 * cfg_.dim, 3 * cfg_.dim);
    auto attn = mha_core(q, k, v, batch, seq, cfg_.heads, key_keep);
    auto proj = add_rowvec(matmul(attn, store_->get(p + "attn_out_w")), store_->get(p + "attn_out_b"));
    x = add(x, proj);

    auto normed2 = layernorm_rows(x, store_->get(p + "ln2_g"), store_->get(p + "ln2_b"));
    const bool vl = l >= cfg_.layers - cfg_.vl_expert_layers;
    ValuePtr ffn_out;
    if (vl) {
      ffn_out = expert_ffn(normed2, "vl", l);
    } else if (txt_idx.empty()) {
      ffn_out = expert_ffn(normed2, "v", l);
    } else if (img_idx.empty()) {
      ffn_out = expert_ffn(normed2, "l", l);
    } else {
      auto img_part = expert_ffn(gather_rows(normed2, img_idx), "v", l);
      auto txt_part = expert_ffn(gather_rows(normed2, txt_idx), "l", l);
      ffn_out = combine_rows(batch * seq, {img_part, txt_part}, {img_idx, txt_idx});
    }
    x = add(x, ffn_out);
  }
  return layernorm_rows(x, store_->get("enc/final_ln_g"), store_->get("enc/final_ln_b"));
}

OneRefModel::Encoded OneRefModel::encode_pair(const Tensor& patches,
                                              const std::vector<int64_t>& text_ids,
                                              const std::vector<uint8_t>& img_mask,
                                              const std::vector<uint8_t>& txt_mask) const {
  const int64_t n_v = cfg_.n_patches();
  const int64_t s_txt = cfg_.max_text_len;
  const int64_t s_img = cfg_.seq_img();
  const int64_t seq = cfg_.seq_total();
  if (patches.rows % n_v != 0 || patches.cols != int64_t(cfg_.patch) * cfg_.patch * 3)
    fail("BadImageShape", "patch tensor " + patches.shape_str());
  const int64_t batch = patches.rows / n_v;
  if (static_cast<int64_t>(text_ids.size()) != batch * s_txt)
    fail("TextTooLong", "text ids " + std::to_string(text_ids.size()) + " for batch " +
                            std::to_string(batch) + " x " + std::to_string(s_txt));
  for (int64_t id : text_ids)
    if (id < 0 || id >= cfg_.vocab) fail("TextTooLong", "token id out of vocabulary");

  // Visual stream: patch projection, mask substitution, positions.
  auto vis = add_rowvec(matmul(constant(patches), store_->get("vis/patch_w")),
                        store_->get("vis/patch_b"));
  vis = masked_replace(vis, img_mask, store_->get("vis/mask"));
  vis = add_tiled(vis, store_->get("vis/pos"));

  // Text stream: embedding, mask substitution, positions.
  auto txt = embedding_lookup(store_->get("txt/emb"), text_ids);
  txt = masked_replace(txt, txt_mask, store_->get("txt/mask"));
  txt = add_tiled(txt, store_->get("txt/pos"));

  auto cls_rows = repeat_rows_grouped(store_->get("vis/cls"), batch);  // [B, D]

  // Interleave per sample: [CLS, patches..., SEP, words..., EOS, pads...].
  std::vector<int64_t> cls_idx(batch), vis_idx(batch * n_v), txt_idx(batch * s_txt);
  for (int64_t b = 0; b < batch; ++b) {
    cls_idx[b] = b * seq;
    for (int64_t i = 0; i < n_v; ++i) vis_idx[b * n_v + i] = b * seq + 1 + i;
    for (int64_t j = 0; j < s_txt; ++j) txt_idx[b * s_txt + j] = b * seq + s_img + j;
  }
  auto x = combine_rows(batch * seq, {cls_rows, vis, txt}, {cls_idx, vis_idx, txt_idx});

  std::vector<uint8_t> key_keep(batch * seq, 1);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t j = 0; j < s_txt; ++j)
      if (text_ids[b * s_txt + j] == 0 /* pad */) key_keep[b * seq + s_img + j] = 0;

  std::vector<uint8_t> is_image(seq, 0);
  for (int64_t s = 0; s < s_img; ++s) is_image[s] = 1;

  auto encoded = encoder(x, batch, seq, key_keep, is_image);

  Encoded out;
  out.batch = batch;
  out.e_cls = gather_rows(encoded, cls_idx);
  out.visual = gather_rows(encoded, vis_idx);
  out.text = gather_rows(encoded, txt_idx);
  std::vector<int64_t> sep_idx(batch);
  for (int64_t b = 0; b < batch; ++b) sep_idx[b] = b * seq + s_img;
  out.e_sep = gather_rows(encoded, sep_idx);
  return out;
}

OneRefModel::EncodedImage OneRefModel::encode_image_only(const Tensor& patches) const {
  const int64_t n_v = cfg_.n_patches();
  if (patches.rows % n_v != 0 || patches.cols != int64_t(cfg_.patch) * cfg_.patch * 3)
    fail("BadImageShape", "patch tensor " + patches.shape_str());
  const int64_t batch = patches.rows / n_v;
  const int64_t seq = 1 + n_v;

  auto vis = add_rowvec(matmul(constant(patches), store_->get("vis/patch_w")),
                        store_->get("vis/patch_b"));
  vis = add_tiled(vis, store_->get("vis/pos"));
  auto cls_rows = repeat_rows_grouped(store_->get("vis/cls"), batch);

  std::vector<int64_t> cls_idx(batch), vis_idx(batch * n_v);
  for (int64_t b = 0; b < batch; ++b) {
    cls_idx[b] = b * seq;
    for (int64_t i = 0; i < n_v; ++i) vis_idx[b * n_v + i] = b * seq + 1 + i;
  }
  auto x = combine_rows(batch * seq, {cls_rows, vis}, {cls_idx, vis_idx});

  std::vector<uint8_t> key_keep(batch * seq, 1);
  std::vector<uint8_t> is_image(seq, 1);
  auto encoded = encoder(x, batch, seq, key_keep, is_image);

  EncodedImage out;
  out.batch = batch;
  out.e_cls = gather_rows(encoded, cls_idx);
  out.tokens = gather_rows(encoded, vis_idx);
  return out;
}

OneRefModel::EncodedText OneRefModel::encode_text_only(const std::vector<int64_t>& text_ids) const {
  const int64_t s_txt = cfg_.max_text_len;
  if (text_ids.size() % s_txt != 0) fail("TextTooLong", "text ids not a multiple of max_text_len");
  const int64_t batch = static_cast<int64_t>(text_ids.size()) / s_txt;

  auto txt = embedding_lookup(store_->get("txt/emb"), text_ids);
  txt = add_tiled(txt, store_->get("txt/pos"));

  std::vector<uint8_t> key_keep(batch * s_txt, 1);
  for (int64_t i = 0; i < batch * s_txt; ++i)
    if (text_ids[i] == 0) key_keep[i] = 0;
  std::vector<uint8_t> is_image(s_txt, 0);
  auto encoded = encoder(txt, batch, s_txt, key_keep, is_image);

  EncodedText out;
  out.batch = batch;
  out.tokens = encoded;
  std::vector<int64_t> sep_idx(batch);
  for (int64_t b = 0; b < batch; ++b) sep_idx[b] = b * s_txt;
  out.e_sep = gather_rows(encoded, sep_idx);
  return out;
}

ValuePtr OneRefModel::mim_head(const Encoded& enc, bool referring) const {
  ValuePtr x = enc.visual;
  if (referring) x = mul(x, repeat_rows_grouped(enc.e_sep, cfg_.n_patches()));
  return add_rowvec(matmul(x, store_->get("head/mim_w")), store_->get("head/mim_b"));
}

ValuePtr OneRefModel::mlm_head(const Encoded& enc, bool referring) const {
  ValuePtr x = enc.text;
  if (referring) x = mul(x, repeat_rows_grouped(enc.e_cls, cfg_.max_text_len));
  return add_rowvec(matmul(x, store_->get("head/mlm_w")), store_->get("head/mlm_b"));
}

ValuePtr OneRefModel::visual_relation_head(const Encoded& enc) const {
  auto x = mul(enc.visual, repeat_rows_grouped(enc.e_sep, cfg_.n_patches()));
  auto raw = mlp3(x, "visrel", 4);
  auto offsets = slice_cols(raw, 0, 2);
  auto proportions = softplus(slice_cols(raw, 2, 4));
  return concat_cols({offsets, proportions});
}

ValuePtr OneRefModel::semantic_relation_head(const Encoded& enc,
                                             const Tensor& valid_additive_mask) const {
  auto x = mul(enc.text, repeat_rows_grouped(enc.e_cls, cfg_.max_text_len));
  auto logits = mlp3(x, "semrel", 1);                                   // [B*S_txt, 1]
  auto rows = reshape_copy(logits, enc.batch, cfg_.max_text_len);       // [B, S_txt]
  return softmax_rows(rows, &valid_additive_mask);
}

OneRefModel::RecOutput OneRefModel::rec_head(const Encoded& enc) const {
  const int64_t n_v = cfg_.n_patches();
  auto sims = cosine_rows_grouped(enc.visual, enc.e_sep, n_v);  // [B*N_v, 1]
  auto sim_rows = reshape_copy(sims, enc.batch, n_v);           // [B, N_v]

  RecOutput out;
  out.sim_softmax = softmax_rows(sim_rows);
  out.sim_sigmoid = sigmoid(scale(sim_rows, sim_scale()));

  auto inner = mlp3(enc.visual, "rec_inner", cfg_.dim);
  auto weighted = mul_colvec(inner, reshape_copy(out.sim_softmax, enc.batch * n_v, 1));
  auto reduced = sum_rows_grouped(weighted, n_v);  // [B, D]
  out.boxes = sigmoid(mlp3(reduced, "rec_out", 4));
  return out;
}

ValuePtr OneRefModel::res_head(const Encoded& enc) const {
  const int64_t n_v = cfg_.n_patches();
  const int64_t half = cfg_.image_size / 2;

  // Per-sample deconvolution stack.
  std::vector<ValuePtr> upsampled(enc.batch);
  for (int64_t b = 0; b < enc.batch; ++b) {
    std::vector<int64_t> rows(n_v);
    for (int64_t i = 0; i < n_v; ++i) rows[i] = b * n_v + i;
    ValuePtr x = gather_rows(enc.visual, rows);
    for (size_t l = 0; l < deconv_plans_.size(); ++l) {
      const std::string p = "head/res/deconv" + std::to_string(l) + "_";
      auto cols = matmul(x, store_->get(p + "w"));
      x = tconv_scatter(cols, deconv_plans_[l], deconv_ch_[l + 1]);
      x = add_rowvec(x, store_->get(p + "b"));
      if (l + 1 < deconv_plans_.size()) x = gelu(x);
    }
    upsampled[b] = x;  // [half*half, c_last]
  }
  auto up = concat_rows(upsampled);  // [B*half*half, c_last]

  auto query = add_rowvec(matmul(enc.e_sep, store_->get("head/res/txt_w")),
                          store_->get("head/res/txt_b"));            // [B, c_last]
  auto sims = cosine_rows_grouped(up, query, half * half);           // [B*hw, 1]
  auto sim_rows = reshape_copy(sims, enc.batch, half * half);        // [B, hw]
  auto full = bilinear_up2_rows(sim_rows, half, half);               // [B, H*W]
  return sigmoid(scale(full, sim_scale()));
}

}  // namespace oneref
