#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oneref/error.hpp"
#include "oneref/model.hpp"

using namespace oneref;

namespace {

ModelConfig desk_config() {
  ModelConfig mc;  // 4 layers, dim 64, heads 4, 96px, patch 16
  mc.vocab = 18;
  return mc;
}

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.layers = 2;
  mc.dim = 8;
  mc.heads = 2;
  mc.vl_expert_layers = 1;
  mc.image_size = 8;
  mc.patch = 4;
  mc.vocab = 12;
  mc.codebook = 8;
  mc.max_text_len = 6;
  return mc;
}

Tensor random_patches(Rng& rng, const ModelConfig& mc, int64_t batch) {
  Tensor t(batch * mc.n_patches(), int64_t(mc.patch) * mc.patch * 3);
  for (int64_t i = 0; i < t.size(); ++i) t.data[i] = rng.uniform();
  return t;
}

std::vector<int64_t> simple_ids(const ModelConfig& mc, int64_t batch, int n_words) {
  std::vector<int64_t> ids(batch * mc.max_text_len, 0);
  for (int64_t b = 0; b < batch; ++b) {
    ids[b * mc.max_text_len] = 1;  // sep
    for (int j = 0; j < n_words; ++j) ids[b * mc.max_text_len + 1 + j] = 5 + (j + b) % (mc.vocab - 5);
    ids[b * mc.max_text_len + 1 + n_words] = 2;  // eos
  }
  return ids;
}

Tensor word_mask(const ModelConfig& mc, int64_t batch, int n_words) {
  Tensor m = Tensor::full(batch, mc.max_text_len, -1e30);
  for (int64_t b = 0; b < batch; ++b)
    for (int j = 0; j < n_words; ++j) m.at(b, 1 + j) = 0.0;
  return m;
}

}  // namespace

TEST_CASE("model config serialization round-trips the nine keys") {
  ModelConfig mc = desk_config();
  mc.layers = 3;
  mc.vl_expert_layers = 2;
  mc.codebook = 32;
  const ModelConfig back = ModelConfig::parse(mc.serialize());
  CHECK(back.layers == mc.layers);
  CHECK(back.dim == mc.dim);
  CHECK(back.heads == mc.heads);
  CHECK(back.vl_expert_layers == mc.vl_expert_layers);
  CHECK(back.image_size == mc.image_size);
  CHECK(back.patch == mc.patch);
  CHECK(back.vocab == mc.vocab);
  CHECK(back.codebook == mc.codebook);
  CHECK(back.max_text_len == mc.max_text_len);

  ModelConfig bad = desk_config();
  bad.dim = 30;  // not divisible by heads
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("encode produces the documented shapes on the desk config") {
  const ModelConfig mc = desk_config();
  ParamStore store(1);
  OneRefModel model(mc, store);
  Rng rng(2);
  const int64_t batch = 3;
  const Tensor patches = random_patches(rng, mc, batch);
  const auto ids = simple_ids(mc, batch, 4);

  const auto enc = model.encode_pair(patches, ids);
  CHECK(enc.batch == batch);
  CHECK(enc.visual->rows() == batch * 36);
  CHECK(enc.visual->cols() == 64);
  CHECK(enc.text->rows() == batch * 16);
  CHECK(enc.text->cols() == 64);
  CHECK(enc.e_cls->rows() == batch);
  CHECK(enc.e_sep->rows() == batch);

  CHECK(model.mim_head(enc)->rows() == batch * 36);
  CHECK(model.mim_head(enc)->cols() == mc.codebook);
  CHECK(model.mlm_head(enc)->cols() == mc.vocab);
  CHECK(model.visual_relation_head(enc)->cols() == 4);
  const auto rec = model.rec_head(enc);
  CHECK(rec.boxes->rows() == batch);
  CHECK(rec.boxes->cols() == 4);
  CHECK(rec.sim_softmax->cols() == 36);
  const auto res = model.res_head(enc);
  CHECK(res->rows() == batch);
  CHECK(res->cols() == 96 * 96);
}

TEST_CASE("unmasked encode is deterministic (pure inference path)") {
  const ModelConfig mc = tiny_config();
  ParamStore store(7);
  OneRefModel model(mc, store);
  Rng rng(3);
  const Tensor patches = random_patches(rng, mc, 2);
  const auto ids = simple_ids(mc, 2, 3);
  const auto a = model.encode_pair(patches, ids);
  const auto b = model.encode_pair(patches, ids);
  for (int64_t i = 0; i < a.visual->data.size(); ++i)
    CHECK(a.visual->data.data[i] == b.visual->data.data[i]);
  for (int64_t i = 0; i < a.e_sep->data.size(); ++i)
    CHECK(a.e_sep->data.data[i] == b.e_sep->data.data[i]);
}

TEST_CASE("permuting two masked patches permutes outputs when positions are zeroed") {
  const ModelConfig mc = tiny_config();
  ParamStore store(11);
  OneRefModel model(mc, store);
  store.get("vis/pos")->data.data.setZero();

  Rng rng(5);
  Tensor patches = random_patches(rng, mc, 1);
  const auto ids = simple_ids(mc, 1, 3);
  std::vector<uint8_t> mask(mc.n_patches(), 0);
  mask[0] = 1;
  mask[2] = 1;

  const auto enc1 = model.encode_pair(patches, ids, mask, {});
  // Swap patch rows 0 and 2 (both masked, so their embeddings are the shared
  // mask token; the raw pixels no longer matter).
  Tensor swapped = patches;
  swapped.mat().row(0) = patches.mat().row(2);
  swapped.mat().row(2) = patches.mat().row(0);
  const auto enc2 = model.encode_pair(swapped, ids, mask, {});
  for (int64_t c = 0; c < mc.dim; ++c) {
    CHECK(enc1.visual->data.at(0, c) == doctest::Approx(enc2.visual->data.at(0, c)).epsilon(1e-12));
    CHECK(enc1.visual->data.at(2, c) == doctest::Approx(enc2.visual->data.at(2, c)).epsilon(1e-12));
  }
}

TEST_CASE("mim head with an all-ones conditioning vector equals the vanilla head") {
  const ModelConfig mc = tiny_config();
  ParamStore store(13);
  OneRefModel model(mc, store);
  OneRefModel::Encoded enc;
  Rng rng(17);
  enc.batch = 2;
  Tensor vis(2 * mc.n_patches(), mc.dim);
  for (int64_t i = 0; i < vis.size(); ++i) vis.data[i] = rng.uniform(-1.0, 1.0);
  enc.visual = leaf(vis, false);
  enc.text = leaf(Tensor(2 * mc.max_text_len, mc.dim), false);
  enc.e_cls = leaf(Tensor::full(2, mc.dim, 1.0), false);
  enc.e_sep = leaf(Tensor::full(2, mc.dim, 1.0), false);

  const auto referring = model.mim_head(enc, true);
  const auto vanilla = model.mim_head(enc, false);
  for (int64_t i = 0; i < referring->data.size(); ++i)
    CHECK(referring->data.data[i] == doctest::Approx(vanilla->data.data[i]).epsilon(1e-12));

  const auto mlm_ref = model.mlm_head(enc, true);
  const auto mlm_van = model.mlm_head(enc, false);
  for (int64_t i = 0; i < mlm_ref->data.size(); ++i)
    CHECK(mlm_ref->data.data[i] == doctest::Approx(mlm_van->data.data[i]).epsilon(1e-12));
}

TEST_CASE("cross-modal coupling: the text stream receives gradient from the image loss") {
  const ModelConfig mc = tiny_config();
  ParamStore store(19);
  OneRefModel model(mc, store);
  Rng rng(23);
  const Tensor patches = random_patches(rng, mc, 2);
  const auto ids = simple_ids(mc, 2, 3);
  std::vector<uint8_t> img_mask(2 * mc.n_patches(), 0);
  img_mask[1] = img_mask[5] = 1;

  const auto enc = model.encode_pair(patches, ids, img_mask, {});
  auto logits = model.mim_head(enc, true);
  store.zero_grads();
  backward(mean_all(logits));
  // e_SEP conditions the MIM head, so the text embedding table must see grad.
  CHECK(store.get("txt/emb")->grad.data.abs().sum() > 0.0);
}

TEST_CASE("relation heads: positivity and distribution") {
  const ModelConfig mc = tiny_config();
  ParamStore store(29);
  OneRefModel model(mc, store);
  Rng rng(31);
  const Tensor patches = random_patches(rng, mc, 2);
  const int n_words = 3;
  const auto ids = simple_ids(mc, 2, n_words);
  const auto enc = model.encode_pair(patches, ids);

  const auto rel = model.visual_relation_head(enc);
  for (int64_t r = 0; r < rel->rows(); ++r) {
    CHECK(rel->data.at(r, 2) > 0.0);  // pw through softplus
    CHECK(rel->data.at(r, 3) > 0.0);  // ph through softplus
  }

  const Tensor valid = word_mask(mc, 2, n_words);
  const auto sem = model.semantic_relation_head(enc, valid);
  for (int64_t b = 0; b < 2; ++b) {
    double sum = 0.0;
    for (int64_t j = 0; j < mc.max_text_len; ++j) {
      if (valid.at(b, j) == 0.0) sum += sem->data.at(b, j);
      else CHECK(sem->data.at(b, j) < 1e-12);  // masked positions get no mass
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("rec head emits valid boxes and a uniform mask for uniform tokens") {
  const ModelConfig mc = tiny_config();
  ParamStore store(37);
  OneRefModel model(mc, store);
  Rng rng(41);
  const Tensor patches = random_patches(rng, mc, 2);
  const auto ids = simple_ids(mc, 2, 2);
  const auto enc = model.encode_pair(patches, ids);
  const auto rec = model.rec_head(enc);
  for (int64_t i = 0; i < rec.boxes->data.size(); ++i) {
    CHECK(rec.boxes->data.data[i] > 0.0);
    CHECK(rec.boxes->data.data[i] < 1.0);
  }

  // Fabricated encoding with identical visual tokens: softmax mask uniform.
  OneRefModel::Encoded fake;
  fake.batch = 1;
  Tensor vis(mc.n_patches(), mc.dim);
  for (int64_t c = 0; c < mc.dim; ++c)
    for (int64_t r = 0; r < vis.rows; ++r) vis.at(r, c) = 0.3 * (c + 1);
  fake.visual = leaf(vis, false);
  fake.text = leaf(Tensor(mc.max_text_len, mc.dim), false);
  fake.e_cls = leaf(Tensor::full(1, mc.dim, 0.5), false);
  fake.e_sep = leaf(Tensor::full(1, mc.dim, 0.5), false);
  const auto uniform = model.rec_head(fake);
  for (int64_t i = 0; i < mc.n_patches(); ++i)
    CHECK(uniform.sim_softmax->data.data[i] ==
          doctest::Approx(1.0 / mc.n_patches()).epsilon(1e-12));
}

TEST_CASE("res head: probabilities in (0,1), constant interior for constant field") {
  const ModelConfig mc = tiny_config();
  ParamStore store(43);
  OneRefModel model(mc, store);
  Rng rng(47);
  const Tensor patches = random_patches(rng, mc, 1);
  const auto ids = simple_ids(mc, 1, 2);
  const auto enc = model.encode_pair(patches, ids);
  const auto probs = model.res_head(enc);
  CHECK(probs->rows() == 1);
  CHECK(probs->cols() == mc.image_size * mc.image_size);
  for (int64_t i = 0; i < probs->data.size(); ++i) {
    CHECK(probs->data.data[i] > 0.0);
    CHECK(probs->data.data[i] < 1.0);
  }

  // Constant visual field: stride-2 transposed convolutions are phase
  // periodic, so away from the borders the mask repeats with the stack's
  // period (2^3 at half resolution = 16 px at full resolution). A 24x24 grid
  // keeps the border influence clear of the probed interior.
  ModelConfig wide = tiny_config();
  wide.image_size = 384;
  wide.patch = 16;
  ParamStore dstore(97);
  OneRefModel dmodel(wide, dstore);
  OneRefModel::Encoded fake;
  fake.batch = 1;
  fake.visual = leaf(Tensor::full(wide.n_patches(), wide.dim, 0.25), false);
  fake.text = leaf(Tensor(wide.max_text_len, wide.dim), false);
  fake.e_cls = leaf(Tensor::full(1, wide.dim, 0.5), false);
  fake.e_sep = leaf(Tensor::full(1, wide.dim, 0.5), false);
  const auto flat = dmodel.res_head(fake);
  const int hw = wide.image_size;
  const int period = 16, margin = 64;
  for (int y = margin; y < hw - margin - period; y += 7)
    for (int x = margin; x < hw - margin - period; x += 7) {
      CHECK(flat->data.at(0, y * hw + x) ==
            doctest::Approx(flat->data.at(0, y * hw + x + period)).epsilon(1e-9));
      CHECK(flat->data.at(0, y * hw + x) ==
            doctest::Approx(flat->data.at(0, (y + period) * hw + x)).epsilon(1e-9));
    }
}

TEST_CASE("expert routing: modality experts exist per layer plan and train only on their side") {
  ModelConfig mc = tiny_config();
  mc.vl_expert_layers = mc.layers;  // all layers routed to the VL expert
  ParamStore all_vl(53);
  OneRefModel model_vl(mc, all_vl);
  CHECK_FALSE(all_vl.has("enc/L0/ffn_v/w1"));
  CHECK_FALSE(all_vl.has("enc/L1/ffn_l/w1"));
  CHECK(all_vl.has("enc/L0/ffn_vl/w1"));
  CHECK(all_vl.has("enc/L1/ffn_vl/w1"));

  // Lower layers route image rows to V and text rows to L; an image-only
  // encode therefore leaves the L expert with exactly zero gradient.
  ModelConfig mixed = tiny_config();
  ParamStore store(59);
  OneRefModel model(mixed, store);
  Rng rng(61);
  const Tensor patches = random_patches(rng, mixed, 2);
  store.zero_grads();
  backward(mean_all(model.encode_image_only(patches).e_cls));
  CHECK(store.get("enc/L0/ffn_v/w1")->grad.data.abs().sum() > 0.0);
  CHECK(store.get("enc/L0/ffn_l/w1")->grad.data.abs().sum() == 0.0);
  CHECK(store.get("enc/L1/ffn_vl/w1")->grad.data.abs().sum() > 0.0);

  // A pair encode exercises both modality experts.
  const auto ids = simple_ids(mixed, 2, 3);
  store.zero_grads();
  backward(mean_all(model.encode_pair(patches, ids).visual));
  CHECK(store.get("enc/L0/ffn_v/w1")->grad.data.abs().sum() > 0.0);
  CHECK(store.get("enc/L0/ffn_l/w1")->grad.data.abs().sum() > 0.0);
}

TEST_CASE("encode validates inputs") {
  const ModelConfig mc = tiny_config();
  ParamStore store(67);
  OneRefModel model(mc, store);
  Rng rng(71);
  const Tensor patches = random_patches(rng, mc, 1);
  std::vector<int64_t> short_ids(mc.max_text_len - 1, 0);
  CHECK_THROWS_AS(model.encode_pair(patches, short_ids), Error);
  std::vector<int64_t> bad_ids(mc.max_text_len, 0);
  bad_ids[0] = mc.vocab + 5;
  CHECK_THROWS_AS(model.encode_pair(patches, bad_ids), Error);
  Tensor bad_patches(3, 7);
  CHECK_THROWS_AS(model.encode_pair(bad_patches, simple_ids(mc, 1, 2)), Error);
}
