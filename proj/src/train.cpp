#include "oneref/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "oneref/adamw.hpp"
#include "oneref/error.hpp"
#include "oneref/scores.hpp"

namespace oneref {

// ---------------------------------------------------------------------------
// TrainConfig

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << model.serialize();
  auto num = [&os](const char* key, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << key << "=" << buf << "\n";
  };
  num("beta", masking.beta);
  num("gamma", masking.gamma);
  num("aspect_a", masking.aspect_a);
  os << "margin=" << masking.margin << "\n";
  num("delta", masking.delta);
  num("lambda_l1", weights.lambda_l1);
  num("lambda_giou", weights.lambda_giou);
  num("lambda_f_box", weights.lambda_f_box);
  num("lambda_d_box", weights.lambda_d_box);
  num("lambda_f_seg", weights.lambda_f_seg);
  num("lambda_d_seg", weights.lambda_d_seg);
  num("lr", lr);
  os << "epochs=" << epochs << "\n";
  os << "batch=" << batch << "\n";
  os << "seed=" << seed << "\n";
  os << "task=" << task << "\n";
  num("weight_decay", weight_decay);
  num("temperature", temperature);
  num("lambda_reg", lambda_reg);
  num("lambda_img", lambda_img);
  num("w_score", w_score);
  num("w_kl", w_kl);
  num("contrastive_temp", contrastive_temp);
  os << "ref_mim=" << ref_mim << "\n";
  os << "ref_mlm=" << ref_mlm << "\n";
  os << "image_masking=" << image_masking << "\n";
  os << "text_masking=" << text_masking << "\n";
  num("vanilla_mask_ratio", vanilla_mask_ratio);
  os << "init_from_teacher=" << init_from_teacher << "\n";
  num("sim_scale", model.sim_scale);
  return os.str();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("ParseError", "bad config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto d = [&val] { return std::stod(val); };
    auto i = [&val] { return std::stoi(val); };
    if (key == "layers") cfg.model.layers = i();
    else if (key == "dim") cfg.model.dim = i();
    else if (key == "heads") cfg.model.heads = i();
    else if (key == "vl_expert_layers") cfg.model.vl_expert_layers = i();
    else if (key == "image_size") cfg.model.image_size = i();
    else if (key == "patch") cfg.model.patch = i();
    else if (key == "vocab") cfg.model.vocab = i();
    else if (key == "codebook") cfg.model.codebook = i();
    else if (key == "max_text_len") cfg.model.max_text_len = i();
    else if (key == "sim_scale") cfg.model.sim_scale = d();
    else if (key == "beta") cfg.masking.beta = d();
    else if (key == "gamma") cfg.masking.gamma = d();
    else if (key == "aspect_a") cfg.masking.aspect_a = d();
    else if (key == "margin") cfg.masking.margin = static_cast<uint32_t>(i());
    else if (key == "delta") cfg.masking.delta = d();
    else if (key == "lambda_l1") cfg.weights.lambda_l1 = d();
    else if (key == "lambda_giou") cfg.weights.lambda_giou = d();
    else if (key == "lambda_f_box") cfg.weights.lambda_f_box = d();
    else if (key == "lambda_d_box") cfg.weights.lambda_d_box = d();
    else if (key == "lambda_f_seg") cfg.weights.lambda_f_seg = d();
    else if (key == "lambda_d_seg") cfg.weights.lambda_d_seg = d();
    else if (key == "lr") cfg.lr = d();
    else if (key == "epochs") cfg.epochs = i();
    else if (key == "batch") cfg.batch = i();
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "task") cfg.task = val;
    else if (key == "weight_decay") cfg.weight_decay = d();
    else if (key == "temperature") cfg.temperature = d();
    else if (key == "lambda_reg") cfg.lambda_reg = d();
    else if (key == "lambda_img") cfg.lambda_img = d();
    else if (key == "w_score") cfg.w_score = d();
    else if (key == "w_kl") cfg.w_kl = d();
    else if (key == "contrastive_temp") cfg.contrastive_temp = d();
    else if (key == "ref_mim") cfg.ref_mim = i();
    else if (key == "ref_mlm") cfg.ref_mlm = i();
    else if (key == "image_masking") cfg.image_masking = val;
    else if (key == "text_masking") cfg.text_masking = val;
    else if (key == "vanilla_mask_ratio") cfg.vanilla_mask_ratio = d();
    else if (key == "init_from_teacher") cfg.init_from_teacher = i();
    else fail("ParseError", "unknown config key: " + key);
  }
  cfg.masking.seed = cfg.seed;
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("IoError", "cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void TrainConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) fail("IoError", "cannot write config " + path);
  os << serialize();
}

double cosine_lr(double base_lr, int64_t step, int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// shared helpers

namespace {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class CsvLogger {
 public:
  CsvLogger(const std::string& path, const std::string& header) {
    if (path.empty()) return;
    os_.open(path);
    if (!os_) fail("IoError", "cannot write log " + path);
    os_ << header << "\n";
  }
  void row(int64_t step, std::initializer_list<double> values) {
    if (!os_.is_open()) return;
    os_ << step;
    for (double v : values) os_ << "," << format_g17(v);
    os_ << "\n";
  }

 private:
  std::ofstream os_;
};

uint64_t mix_epoch_seed(uint64_t seed, int epoch) {
  return seed ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(epoch + 1));
}

std::vector<int64_t> epoch_order(size_t n, uint64_t seed, int epoch) {
  std::vector<int64_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int64_t>(i);
  Rng rng(mix_epoch_seed(seed, epoch));
  for (size_t i = 0; i + 1 < n; ++i) {
    const size_t j = i + static_cast<size_t>(rng.below(n - i));
    std::swap(order[i], order[j]);
  }
  return order;
}

std::vector<int64_t> identity_order(size_t n) {
  std::vector<int64_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int64_t>(i);
  return order;
}

struct Batch {
  Tensor patches;                         // [B*N_v, P*P*3]
  std::vector<int64_t> text_ids;          // B*S_txt
  std::vector<const RefSample*> samples;  // size B
  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

Batch make_batch(const std::vector<RefSample>& split, const std::vector<int64_t>& order,
                 size_t begin, size_t end, const ModelConfig& mc) {
  Batch b;
  const int64_t n_v = mc.n_patches();
  const int64_t cols = int64_t(mc.patch) * mc.patch * 3;
  const int64_t count = static_cast<int64_t>(end - begin);
  b.patches = Tensor(count * n_v, cols);
  b.text_ids.reserve(count * mc.max_text_len);
  b.samples.reserve(count);
  for (size_t k = begin; k < end; ++k) {
    const RefSample& s = split[order[k]];
    b.samples.push_back(&s);
    const Tensor p = extract_patches(to_f64(s.image), mc.patch);
    b.patches.mat().middleRows(int64_t(k - begin) * n_v, n_v) = p.mat();
    b.text_ids.insert(b.text_ids.end(), s.token_ids.begin(), s.token_ids.end());
  }
  return b;
}

// L2-normalizes each row (graph).
ValuePtr l2_normalize_rows(const ValuePtr& x) {
  auto inv_norms = pow_const(clamp_min(row_sums(square(x)), 1e-24), -0.5);
  return mul_colvec(x, inv_norms);
}

void check_finite(double v, const TrainConfig& cfg, int epoch, int64_t step) {
  if (!std::isfinite(v))
    fail("NaNLoss", "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                        std::to_string(step) + " (seed " + std::to_string(cfg.seed) + ")");
}

// Checkpoints carry optimizer moments; a new training phase starts fresh.
void reset_optimizer_state(ParamStore& store) {
  for (auto& [name, v] : store.all())
    if (name.rfind("_adam", 0) == 0) v->data.data.setZero();
}

ModelConfig resolve_model_config(const TrainConfig& cfg, const Corpus& corpus) {
  ModelConfig mc = cfg.model;
  if (mc.vocab == 0) {
    mc.vocab = static_cast<int>(corpus.vocab.size());
  } else if (mc.vocab != corpus.vocab.size()) {
    fail("ShapeMismatch", "config vocab " + std::to_string(mc.vocab) + " vs corpus " +
                              std::to_string(corpus.vocab.size()));
  }
  if (mc.image_size != corpus.image_size)
    fail("BadImageShape", "config image_size " + std::to_string(mc.image_size) + " vs corpus " +
                              std::to_string(corpus.image_size));
  return mc;
}

MaskPlan image_mask_plan(const TrainConfig& cfg, const ModelConfig& mc, const RefSample& s,
                         Rng& rng) {
  const PatchGrid grid(mc.image_size, mc.image_size, mc.patch);
  if (cfg.image_masking == "referring") {
    const PatchRegion region = box_to_patch_region(s.box, grid, cfg.masking.margin);
    return referring_dynamic_mask(grid, region, cfg.masking, rng);
  }
  if (cfg.image_masking == "random") {
    return random_mask(grid.num_patches(), cfg.vanilla_mask_ratio, rng);
  }
  if (cfg.image_masking == "block") {
    return blockwise_mask(grid, cfg.vanilla_mask_ratio, cfg.masking.aspect_a, rng);
  }
  fail("ParseError", "unknown image_masking: " + cfg.image_masking);
}

MaskPlan text_mask_plan(const TrainConfig& cfg, const ModelConfig& mc, const RefSample& s,
                        Rng& rng) {
  std::vector<uint8_t> maskable(mc.max_text_len, 0);
  for (int j = 0; j < s.n_words; ++j) maskable[1 + j] = 1;
  std::optional<std::pair<uint32_t, uint32_t>> span;
  if (cfg.text_masking == "referring" && s.subject_span) span = s.subject_span;
  return referring_text_mask(maskable, span, cfg.masking.delta, rng);
}

// [B, S_txt] additive mask: 0 at real word positions, -1e30 elsewhere.
Tensor word_position_mask(const std::vector<const RefSample*>& samples, int s_txt) {
  Tensor mask = Tensor::full(static_cast<int64_t>(samples.size()), s_txt, -1e30);
  for (size_t b = 0; b < samples.size(); ++b)
    for (int j = 0; j < samples[b]->n_words; ++j) mask.at(b, 1 + j) = 0.0;
  return mask;
}

Tensor gt_box_tensor(const std::vector<const RefSample*>& samples) {
  Tensor gt(static_cast<int64_t>(samples.size()), 4);
  for (size_t b = 0; b < samples.size(); ++b) {
    gt.at(b, 0) = samples[b]->box.x_c;
    gt.at(b, 1) = samples[b]->box.y_c;
    gt.at(b, 2) = samples[b]->box.w_r;
    gt.at(b, 3) = samples[b]->box.h_r;
  }
  return gt;
}

Tensor gt_raster_tensor(const std::vector<const RefSample*>& samples, int grid_side) {
  Tensor raster(static_cast<int64_t>(samples.size()), int64_t(grid_side) * grid_side);
  for (size_t b = 0; b < samples.size(); ++b) {
    const MaskPlan plan = box_to_raster_mask(samples[b]->box, grid_side, grid_side);
    for (uint32_t i = 0; i < plan.size(); ++i) raster.at(b, i) = plan.at_flat(i) ? 1.0 : 0.0;
  }
  return raster;
}

Tensor gt_seg_tensor(const std::vector<const RefSample*>& samples, int hw) {
  Tensor seg(static_cast<int64_t>(samples.size()), hw);
  for (size_t b = 0; b < samples.size(); ++b) {
    if (samples[b]->seg_mask.empty())
      fail("MissingSegMask", "sample " + std::to_string(samples[b]->sample_id) +
                                 " has no segmentation mask");
    for (int i = 0; i < hw; ++i) seg.at(b, i) = samples[b]->seg_mask[i] ? 1.0 : 0.0;
  }
  return seg;
}

}  // namespace

VisualTokenizer build_visual_tokenizer(const Corpus& corpus, int patch, int k, uint64_t seed) {
  const size_t max_samples = 2000;
  const size_t n = std::min(corpus.train.size(), max_samples);
  if (n == 0) fail("EmptyEvalSet", "cannot fit tokenizer on empty train split");
  const int gh = corpus.image_size / patch;
  const int64_t per = int64_t(gh) * gh;
  Tensor all(static_cast<int64_t>(n) * per, 3);
  for (size_t i = 0; i < n; ++i) {
    const Tensor m = patch_mean_rgb(to_f64(corpus.train[i].image), patch);
    all.mat().middleRows(static_cast<int64_t>(i) * per, per) = m.mat();
  }
  return VisualTokenizer::fit(all, k, seed);
}

// ---------------------------------------------------------------------------
// warmup

namespace {

// In-batch text-to-image top-1 retrieval accuracy on one split.
double retrieval_top1(const OneRefModel& model, const std::vector<RefSample>& split, int batch) {
  const ModelConfig& mc = model.config();
  const auto order = identity_order(split.size());
  int64_t correct = 0, total = 0;
  for (size_t begin = 0; begin < split.size(); begin += batch) {
    const size_t end = std::min(split.size(), begin + batch);
    if (end - begin < 2) continue;
    const Batch b = make_batch(split, order, begin, end, mc);
    auto img = model.encode_image_only(b.patches);
    auto txt = model.encode_text_only(b.text_ids);
    auto zi = l2_normalize_rows(img.e_cls);
    auto zt = l2_normalize_rows(txt.e_sep);
    auto logits = matmul(zt, zi, false, true);  // text rows x image cols
    for (int64_t r = 0; r < logits->rows(); ++r) {
      int64_t arg = 0;
      double best = -1e300;
      for (int64_t c = 0; c < logits->cols(); ++c)
        if (logits->data.at(r, c) > best) {
          best = logits->data.at(r, c);
          arg = c;
        }
      correct += arg == r;
      ++total;
    }
  }
  if (total == 0) fail("EmptyEvalSet", "retrieval gate needs at least one full batch");
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

void warmup_teacher(const TrainConfig& cfg, const Corpus& corpus, const std::string& out_ckpt,
                    const std::string& log_csv) {
  const ModelConfig mc = resolve_model_config(cfg, corpus);
  ParamStore store(cfg.seed);
  OneRefModel model(mc, store);
  AdamW opt(store, cfg.lr, cfg.weight_decay);
  CsvLogger log(log_csv, "step,loss_total");

  const int64_t batches_per_epoch =
      static_cast<int64_t>((corpus.train.size() + cfg.batch - 1) / cfg.batch);
  const int64_t total_steps = batches_per_epoch * cfg.epochs;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(corpus.train.size(), cfg.seed, epoch);
    for (size_t begin = 0; begin < corpus.train.size(); begin += cfg.batch) {
      const size_t end = std::min(corpus.train.size(), begin + cfg.batch);
      if (end - begin < 2) continue;  // InfoNCE needs in-batch negatives
      const Batch b = make_batch(corpus.train, order, begin, end, mc);

      auto img = model.encode_image_only(b.patches);
      auto txt = model.encode_text_only(b.text_ids);
      auto zi = l2_normalize_rows(img.e_cls);
      auto zt = l2_normalize_rows(txt.e_sep);
      const double inv_temp = 1.0 / cfg.contrastive_temp;
      auto logits_it = scale(matmul(zi, zt, false, true), inv_temp);
      auto logits_ti = scale(matmul(zt, zi, false, true), inv_temp);
      std::vector<int64_t> labels(b.size());
      for (int64_t i = 0; i < b.size(); ++i) labels[i] = i;
      auto loss = scale(add(mean_all(cross_entropy_rows(logits_it, labels)),
                            mean_all(cross_entropy_rows(logits_ti, labels))),
                        0.5);
      check_finite(loss->scalar(), cfg, epoch, step);
      log.row(step, {loss->scalar()});

      store.zero_grads();
      backward(loss);
      opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
      opt.step();
      ++step;
    }
  }

  store.freeze();
  const double top1 = retrieval_top1(model, corpus.val, cfg.batch);
  if (top1 < 0.9)
    fail("TeacherGateFailed", "val in-batch retrieval top-1 " + format_g17(top1) + " < 0.9");
  save_checkpoint(store, out_ckpt, mc.serialize());
}

// ---------------------------------------------------------------------------
// teacher targets

std::pair<Tensor, Tensor> teacher_region_embedding(const OneRefModel& teacher,
                                                   const ImageU8& image, const Box& box) {
  const ModelConfig& mc = teacher.config();
  const ImageF64 full = to_f64(image);
  const auto corners = box.to_corners();
  double x0 = std::clamp(corners[0], 0.0, 1.0) * image.w;
  double y0 = std::clamp(corners[1], 0.0, 1.0) * image.h;
  double x1 = std::clamp(corners[2], 0.0, 1.0) * image.w;
  double y1 = std::clamp(corners[3], 0.0, 1.0) * image.h;
  if (x1 - x0 < 1.0) x1 = std::min<double>(image.w, x0 + 1.0);
  if (y1 - y0 < 1.0) y1 = std::min<double>(image.h, y0 + 1.0);
  const ImageF64 crop = crop_resize_bilinear(full, x0, y0, x1, y1, mc.image_size, mc.image_size);

  auto enc_full = teacher.encode_image_only(extract_patches(full, mc.patch));
  auto enc_crop = teacher.encode_image_only(extract_patches(crop, mc.patch));

  auto normalize = [](const Tensor& t) {
    Tensor out = t;
    const double n = std::max(1e-12, out.mat().row(0).norm());
    out.data /= n;
    return out;
  };
  return {normalize(enc_crop.e_cls->data), normalize(enc_full.e_cls->data)};
}

namespace {

struct PretrainTargets {
  std::vector<std::vector<int64_t>> codes;  // per sample: N_v codebook ids
  std::vector<Tensor> semantic;             // per sample: [S_txt, 1]
};

PretrainTargets prepare_pretrain_targets(const TrainConfig& cfg, const ModelConfig& mc,
                                         const Corpus& corpus, const OneRefModel& teacher,
                                         const VisualTokenizer& tokenizer) {
  PretrainTargets targets;
  const auto& split = corpus.train;
  targets.codes.resize(split.size());
  targets.semantic.resize(split.size());
  const auto order = identity_order(split.size());
  const int64_t n_v = mc.n_patches();
  const int64_t cols = int64_t(mc.patch) * mc.patch * 3;

  for (size_t begin = 0; begin < split.size(); begin += cfg.batch) {
    const size_t end = std::min(split.size(), begin + cfg.batch);
    const Batch b = make_batch(split, order, begin, end, mc);

    // Crops of the referred boxes, re-encoded at full input size.
    Tensor crop_patches(b.size() * n_v, cols);
    for (int64_t k = 0; k < b.size(); ++k) {
      const RefSample& s = *b.samples[k];
      const ImageF64 full = to_f64(s.image);
      const auto c = s.box.to_corners();
      double x0 = std::clamp(c[0], 0.0, 1.0) * s.image.w;
      double y0 = std::clamp(c[1], 0.0, 1.0) * s.image.h;
      double x1 = std::clamp(c[2], 0.0, 1.0) * s.image.w;
      double y1 = std::clamp(c[3], 0.0, 1.0) * s.image.h;
      if (x1 - x0 < 1.0) x1 = std::min<double>(s.image.w, x0 + 1.0);
      if (y1 - y0 < 1.0) y1 = std::min<double>(s.image.h, y0 + 1.0);
      const ImageF64 crop = crop_resize_bilinear(full, x0, y0, x1, y1, mc.image_size, mc.image_size);
      crop_patches.mat().middleRows(k * n_v, n_v) = extract_patches(crop, mc.patch).mat();
    }

    auto enc_img = teacher.encode_image_only(b.patches);
    auto enc_crop = teacher.encode_image_only(crop_patches);
    auto enc_txt = teacher.encode_text_only(b.text_ids);

    for (int64_t k = 0; k < b.size(); ++k) {
      const size_t idx = begin + k;
      const RefSample& s = *b.samples[k];
      targets.codes[idx] = tokenizer.assign(patch_mean_rgb(to_f64(s.image), mc.patch));

      Tensor sem(mc.max_text_len, 1);
      if (s.n_words > 0) {
        Tensor words(s.n_words, mc.dim);
        for (int j = 0; j < s.n_words; ++j)
          words.mat().row(j) = enc_txt.tokens->data.mat().row(k * mc.max_text_len + 1 + j);
        Tensor e_img(1, mc.dim), e_reg(1, mc.dim);
        e_img.mat().row(0) = enc_img.e_cls->data.mat().row(k);
        e_reg.mat().row(0) = enc_crop.e_cls->data.mat().row(k);
        const SemanticRelationScore score = semantic_target_relation(
            words, e_reg, e_img, cfg.lambda_reg, cfg.lambda_img, cfg.temperature);
        for (int j = 0; j < s.n_words; ++j) sem.data[1 + j] = score.values.data[j];
      }
      targets.semantic[idx] = std::move(sem);
    }
  }
  return targets;
}

}  // namespace

// ---------------------------------------------------------------------------
// pretraining

void pretrain_mrefm(const TrainConfig& cfg, const Corpus& corpus, const std::string& teacher_ckpt,
                    const std::string& out_ckpt, const std::string& log_csv) {
  const ModelConfig mc = resolve_model_config(cfg, corpus);

  // Frozen teacher.
  ParamStore teacher_store;
  const std::string teacher_header = load_checkpoint(teacher_store, teacher_ckpt);
  ModelConfig teacher_cfg = ModelConfig::parse(teacher_header);
  OneRefModel teacher(teacher_cfg, teacher_store);
  teacher_store.freeze();

  // Student, optionally initialized from the teacher weights.
  ParamStore store(cfg.seed);
  if (cfg.init_from_teacher) {
    load_checkpoint(store, teacher_ckpt);
    reset_optimizer_state(store);
  }
  OneRefModel model(mc, store);

  const VisualTokenizer tokenizer =
      build_visual_tokenizer(corpus, mc.patch, mc.codebook, cfg.seed);
  auto cents = store.state("_vistok/centroids", mc.codebook, 3);
  cents->data = tokenizer.centroids();

  const PretrainTargets targets = prepare_pretrain_targets(cfg, mc, corpus, teacher, tokenizer);

  AdamW opt(store, cfg.lr, cfg.weight_decay);
  CsvLogger log(log_csv, "step,loss_total,loss_mim,loss_rel_v,loss_mlm,loss_kl");

  const int64_t n_v = mc.n_patches();
  const int64_t s_txt = mc.max_text_len;
  const PatchGrid grid(mc.image_size, mc.image_size, mc.patch);
  const int64_t batches_per_epoch =
      static_cast<int64_t>((corpus.train.size() + cfg.batch - 1) / cfg.batch);
  const int64_t total_steps = batches_per_epoch * cfg.epochs;

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(corpus.train.size(), cfg.seed, epoch);
    for (size_t begin = 0; begin < corpus.train.size(); begin += cfg.batch) {
      const size_t end = std::min(corpus.train.size(), begin + cfg.batch);
      const Batch b = make_batch(corpus.train, order, begin, end, mc);

      // Mask plans and supervision targets for this step.
      std::vector<uint8_t> img_mask(b.size() * n_v, 0), txt_mask(b.size() * s_txt, 0);
      std::vector<int64_t> img_rows, img_codes, txt_rows, txt_targets;
      Tensor rel_target(b.size() * n_v, 4);
      Tensor sem_target(b.size(), s_txt);
      for (int64_t k = 0; k < b.size(); ++k) {
        const RefSample& s = *b.samples[k];
        Rng rng = per_sample_rng(mix_epoch_seed(cfg.seed, epoch), s.sample_id);
        const MaskPlan ip = image_mask_plan(cfg, mc, s, rng);
        const MaskPlan tp = text_mask_plan(cfg, mc, s, rng);
        const auto& codes = targets.codes[s.sample_id];
        for (int64_t i = 0; i < n_v; ++i) {
          if (ip.at_flat(static_cast<uint32_t>(i))) {
            img_mask[k * n_v + i] = 1;
            img_rows.push_back(k * n_v + i);
            img_codes.push_back(codes[i]);
          }
        }
        for (int64_t j = 0; j < s_txt; ++j) {
          if (tp.at_flat(static_cast<uint32_t>(j))) {
            txt_mask[k * s_txt + j] = 1;
            txt_rows.push_back(k * s_txt + j);
            txt_targets.push_back(s.token_ids[j]);
          }
        }
        if (cfg.ref_mim) {
          const VisualRelationScore vr = visual_target_relation(grid, s.box);
          rel_target.mat().middleRows(k * n_v, n_v) = vr.values.mat();
        }
        if (cfg.ref_mlm)
          for (int64_t j = 0; j < s_txt; ++j)
            sem_target.at(k, j) = targets.semantic[s.sample_id].data[j];
      }

      auto enc = model.encode_pair(b.patches, b.text_ids, img_mask, txt_mask);

      ValuePtr loss_mim, loss_rel, loss_mlm, loss_kl;
      if (!img_rows.empty()) {
        auto logits = gather_rows(model.mim_head(enc, cfg.ref_mim != 0), img_rows);
        loss_mim = masked_token_loss_graph(logits, img_codes);
      } else {
        loss_mim = constant(Tensor::scalar(0.0));
      }
      if (cfg.ref_mim) {
        loss_rel = smooth_l1_graph(model.visual_relation_head(enc), rel_target);
      } else {
        loss_rel = constant(Tensor::scalar(0.0));
      }
      if (!txt_rows.empty()) {
        auto logits = gather_rows(model.mlm_head(enc, cfg.ref_mlm != 0), txt_rows);
        loss_mlm = masked_token_loss_graph(logits, txt_targets);
      } else {
        loss_mlm = constant(Tensor::scalar(0.0));
      }
      if (cfg.ref_mlm) {
        const Tensor valid = word_position_mask(b.samples, s_txt);
        auto pred = model.semantic_relation_head(enc, valid);
        loss_kl = mean_all(kl_rows_graph(pred, sem_target));
      } else {
        loss_kl = constant(Tensor::scalar(0.0));
      }

      auto loss = add(add(loss_mim, scale(loss_rel, cfg.w_score)),
                      add(loss_mlm, scale(loss_kl, cfg.w_kl)));
      check_finite(loss->scalar(), cfg, epoch, step);
      log.row(step, {loss->scalar(), loss_mim->scalar(), loss_rel->scalar(), loss_mlm->scalar(),
                     loss_kl->scalar()});

      store.zero_grads();
      backward(loss);
      opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
      opt.step();
      ++step;
    }
    save_checkpoint(store, out_ckpt, mc.serialize());
  }
}

// ---------------------------------------------------------------------------
// transfer

namespace {

std::vector<Box> predict_boxes(const OneRefModel& model, const std::vector<RefSample>& split,
                               int batch) {
  const ModelConfig& mc = model.config();
  const auto order = identity_order(split.size());
  std::vector<Box> out;
  out.reserve(split.size());
  for (size_t begin = 0; begin < split.size(); begin += batch) {
    const size_t end = std::min(split.size(), begin + batch);
    const Batch b = make_batch(split, order, begin, end, mc);
    auto enc = model.encode_pair(b.patches, b.text_ids);
    auto rec = model.rec_head(enc);
    for (int64_t k = 0; k < b.size(); ++k) {
      Box box;
      box.x_c = rec.boxes->data.at(k, 0);
      box.y_c = rec.boxes->data.at(k, 1);
      box.w_r = rec.boxes->data.at(k, 2);
      box.h_r = rec.boxes->data.at(k, 3);
      out.push_back(box);
    }
  }
  return out;
}

std::vector<std::vector<uint8_t>> predict_masks(const OneRefModel& model,
                                                const std::vector<RefSample>& split, int batch) {
  const ModelConfig& mc = model.config();
  const auto order = identity_order(split.size());
  std::vector<std::vector<uint8_t>> out;
  out.reserve(split.size());
  for (size_t begin = 0; begin < split.size(); begin += batch) {
    const size_t end = std::min(split.size(), begin + batch);
    const Batch b = make_batch(split, order, begin, end, mc);
    auto enc = model.encode_pair(b.patches, b.text_ids);
    auto probs = model.res_head(enc);
    for (int64_t k = 0; k < b.size(); ++k) {
      std::vector<double> row(probs->cols());
      for (int64_t i = 0; i < probs->cols(); ++i) row[i] = probs->data.at(k, i);
      out.push_back(binarize(row));
    }
  }
  return out;
}

}  // namespace

EvalReport evaluate_model(const OneRefModel& model, const Corpus& corpus,
                          const std::vector<RefSample>& split, const std::string& task,
                          int batch) {
  (void)corpus;
  if (split.empty()) fail("EmptyEvalSet", "empty evaluation split");
  EvalReport report;
  report.n_samples = static_cast<int64_t>(split.size());
  if (task == "rec") {
    const auto preds = predict_boxes(model, split, batch);
    std::vector<Box> gts;
    gts.reserve(split.size());
    for (const auto& s : split) gts.push_back(s.box);
    report.acc50 = acc_at_iou(preds, gts, 0.5);
    double iou_sum = 0.0, inter_sum = 0.0, uni_sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
      const double v = iou(preds[i], gts[i]);
      iou_sum += v;
      const double uni = preds[i].area() + gts[i].area();
      // inter from iou: iou = inter/(union), union = a+b-inter.
      const double inter = v * uni / (1.0 + v);
      inter_sum += inter;
      uni_sum += uni - inter;
    }
    report.miou = iou_sum / static_cast<double>(preds.size());
    report.oiou = uni_sum > 0.0 ? inter_sum / uni_sum : 1.0;
  } else if (task == "res") {
    const auto preds = predict_masks(model, split, batch);
    std::vector<MaskPair> pairs(split.size());
    int64_t hits = 0;
    for (size_t i = 0; i < split.size(); ++i) {
      if (split[i].seg_mask.empty())
        fail("MissingSegMask", "sample " + std::to_string(split[i].sample_id));
      pairs[i].pred = preds[i];
      pairs[i].gt = split[i].seg_mask;
      if (mask_iou(pairs[i].pred, pairs[i].gt) >= 0.5) ++hits;
    }
    report.acc50 = static_cast<double>(hits) / static_cast<double>(split.size());
    report.miou = miou(pairs);
    report.oiou = oiou(pairs);
  } else {
    fail("ParseError", "unknown eval task: " + task);
  }
  return report;
}

EvalReport evaluate_checkpoint(const std::string& ckpt, const Corpus& corpus,
                               const std::vector<RefSample>& split, const std::string& task,
                               int batch) {
  ParamStore store;
  const std::string header = load_checkpoint(store, ckpt);
  ModelConfig mc = ModelConfig::parse(header);
  OneRefModel model(mc, store);
  store.freeze();
  return evaluate_model(model, corpus, split, task, batch);
}

void finetune(const TrainConfig& cfg, const Corpus& corpus, const std::string& task,
              const std::string& init_ckpt, const std::string& out_ckpt,
              const std::string& log_csv) {
  if (task != "rec" && task != "res") fail("ParseError", "finetune task must be rec or res");
  const ModelConfig mc = resolve_model_config(cfg, corpus);

  ParamStore store(cfg.seed);
  if (!init_ckpt.empty()) {
    load_checkpoint(store, init_ckpt);
    reset_optimizer_state(store);
  }
  OneRefModel model(mc, store);

  AdamW opt(store, cfg.lr, cfg.weight_decay);
  CsvLogger log(log_csv, "step,loss_total,loss_l1,loss_giou,loss_focal,loss_dice");
  CsvLogger val_log(log_csv.empty() ? "" : log_csv + ".val", "epoch,val_metric");

  const int64_t batches_per_epoch =
      static_cast<int64_t>((corpus.train.size() + cfg.batch - 1) / cfg.batch);
  const int64_t total_steps = batches_per_epoch * cfg.epochs;
  const int grid_side = mc.grid_side();
  const int64_t hw = int64_t(mc.image_size) * mc.image_size;

  double best_metric = -1.0;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(corpus.train.size(), cfg.seed, epoch);
    for (size_t begin = 0; begin < corpus.train.size(); begin += cfg.batch) {
      const size_t end = std::min(corpus.train.size(), begin + cfg.batch);
      const Batch b = make_batch(corpus.train, order, begin, end, mc);
      auto enc = model.encode_pair(b.patches, b.text_ids);  // no masking at transfer

      ValuePtr loss, l1, giou_term, focal_term, dice_term;
      const auto zero = [] { return constant(Tensor::scalar(0.0)); };
      if (task == "rec") {
        auto rec = model.rec_head(enc);
        const Tensor gt = gt_box_tensor(b.samples);
        const Tensor raster = gt_raster_tensor(b.samples, grid_side);
        l1 = smooth_l1_graph(rec.boxes, gt);
        auto giou_col = giou_rows_graph(rec.boxes, gt);
        giou_term = mean_all(sub(constant(Tensor::full(giou_col->rows(), 1, 1.0)), giou_col));
        focal_term = focal_graph(rec.sim_sigmoid, raster);
        dice_term = dice_graph(rec.sim_sigmoid, raster);
        loss = add(add(scale(l1, cfg.weights.lambda_l1), scale(giou_term, cfg.weights.lambda_giou)),
                   add(scale(focal_term, cfg.weights.lambda_f_box),
                       scale(dice_term, cfg.weights.lambda_d_box)));
      } else {
        auto probs = model.res_head(enc);
        const Tensor gt = gt_seg_tensor(b.samples, hw);
        l1 = zero();
        giou_term = zero();
        focal_term = focal_graph(probs, gt);
        dice_term = dice_graph(probs, gt);
        loss = add(scale(focal_term, cfg.weights.lambda_f_seg),
                   scale(dice_term, cfg.weights.lambda_d_seg));
      }

      check_finite(loss->scalar(), cfg, epoch, step);
      log.row(step, {loss->scalar(), l1->scalar(), giou_term->scalar(), focal_term->scalar(),
                     dice_term->scalar()});

      store.zero_grads();
      backward(loss);
      opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
      opt.step();
      ++step;
    }

    const EvalReport r = evaluate_model(model, corpus, corpus.val, task, cfg.batch);
    const double metric = task == "rec" ? r.acc50 : r.miou;
    val_log.row(epoch, {metric});
    if (metric > best_metric) {
      best_metric = metric;
      save_checkpoint(store, out_ckpt, mc.serialize());
    }
  }
}

// ---------------------------------------------------------------------------
// gradient checking

ModelConfig micro_model_config() {
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

double GradCheckReport::worst_rel_err() const {
  double worst = 0.0;
  for (const auto& e : entries)
    if (!e.dead) worst = std::max(worst, e.max_rel_err);
  return worst;
}

std::string GradCheckReport::serialize() const {
  std::string out = "n_params=" + std::to_string(n_params) + "\n";
  for (const auto& e : entries) {
    out += "loss=" + e.loss + " tensor=" + e.tensor +
           " max_rel_err=" + format_g17(e.max_rel_err) + " status=" + (e.dead ? "dead" : "ok") +
           "\n";
  }
  out += "worst_rel_err=" + format_g17(worst_rel_err()) + "\n";
  return out;
}

GradCheckReport grad_check(const TrainConfig& cfg_in, double tolerance) {
  TrainConfig cfg = cfg_in;
  const ModelConfig mc = cfg.model.vocab == 0 ? micro_model_config() : cfg.model;

  ParamStore store(cfg.seed + 17);
  OneRefModel model(mc, store);

  // Deterministic synthetic inputs exercising every head.
  Rng rng(cfg.seed + 4242);
  const int64_t batch = 2;
  const int64_t n_v = mc.n_patches();
  const int64_t s_txt = mc.max_text_len;
  Tensor patches(batch * n_v, int64_t(mc.patch) * mc.patch * 3);
  for (int64_t i = 0; i < patches.size(); ++i) patches.data[i] = rng.uniform();
  std::vector<int64_t> ids(batch * s_txt, 0);
  const int n_words = static_cast<int>(s_txt) - 2;
  for (int64_t b = 0; b < batch; ++b) {
    ids[b * s_txt] = 1;  // sep
    for (int j = 0; j < n_words; ++j)
      ids[b * s_txt + 1 + j] = 5 + static_cast<int64_t>(rng.below(mc.vocab - 5));
    ids[b * s_txt + 1 + n_words] = 2;  // eos
  }
  std::vector<uint8_t> img_mask(batch * n_v, 0), txt_mask(batch * s_txt, 0);
  std::vector<int64_t> img_rows, img_codes, txt_rows, txt_targets;
  for (int64_t i = 0; i < batch * n_v; ++i) {
    if (rng.uniform() < 0.5) {
      img_mask[i] = 1;
      img_rows.push_back(i);
      img_codes.push_back(static_cast<int64_t>(rng.below(mc.codebook)));
    }
  }
  for (int64_t b = 0; b < batch; ++b)
    for (int j = 0; j < n_words; ++j)
      if (rng.uniform() < 0.5) {
        const int64_t pos = b * s_txt + 1 + j;
        txt_mask[pos] = 1;
        txt_rows.push_back(pos);
        txt_targets.push_back(ids[pos]);
      }
  if (img_rows.empty()) {
    img_mask[0] = 1;
    img_rows.push_back(0);
    img_codes.push_back(0);
  }
  if (txt_rows.empty()) {
    txt_mask[1] = 1;
    txt_rows.push_back(1);
    txt_targets.push_back(ids[1]);
  }

  const PatchGrid grid(mc.image_size, mc.image_size, mc.patch);
  Box gt_box;
  gt_box.x_c = 0.4 + 0.2 * rng.uniform();
  gt_box.y_c = 0.4 + 0.2 * rng.uniform();
  gt_box.w_r = 0.3 + 0.2 * rng.uniform();
  gt_box.h_r = 0.3 + 0.2 * rng.uniform();
  Tensor rel_target(batch * n_v, 4);
  for (int64_t b = 0; b < batch; ++b) {
    const VisualRelationScore vr = visual_target_relation(grid, gt_box);
    rel_target.mat().middleRows(b * n_v, n_v) = vr.values.mat();
  }
  Tensor sem_target(batch, s_txt);
  for (int64_t b = 0; b < batch; ++b) {
    Eigen::ArrayXd raw(n_words);
    for (int j = 0; j < n_words; ++j) raw[j] = rng.uniform();
    raw = (raw - raw.maxCoeff()).exp();
    raw /= raw.sum();
    for (int j = 0; j < n_words; ++j) sem_target.at(b, 1 + j) = raw[j];
  }
  Tensor valid = Tensor::full(batch, s_txt, -1e30);
  for (int64_t b = 0; b < batch; ++b)
    for (int j = 0; j < n_words; ++j) valid.at(b, 1 + j) = 0.0;

  Tensor gt_boxes(batch, 4);
  for (int64_t b = 0; b < batch; ++b) {
    gt_boxes.at(b, 0) = gt_box.x_c;
    gt_boxes.at(b, 1) = gt_box.y_c;
    gt_boxes.at(b, 2) = gt_box.w_r;
    gt_boxes.at(b, 3) = gt_box.h_r;
  }
  Tensor raster(batch, int64_t(mc.grid_side()) * mc.grid_side());
  const MaskPlan rplan = box_to_raster_mask(gt_box, mc.grid_side(), mc.grid_side());
  for (int64_t b = 0; b < batch; ++b)
    for (uint32_t i = 0; i < rplan.size(); ++i) raster.at(b, i) = rplan.at_flat(i) ? 1.0 : 0.0;
  const int64_t hw = int64_t(mc.image_size) * mc.image_size;
  Tensor seg(batch, hw);
  for (int64_t i = 0; i < seg.size(); ++i) seg.data[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;

  // Loss builders (fresh graph per call).
  auto mrefm_loss = [&]() -> ValuePtr {
    auto enc = model.encode_pair(patches, ids, img_mask, txt_mask);
    auto mim = masked_token_loss_graph(gather_rows(model.mim_head(enc, true), img_rows), img_codes);
    auto rel = smooth_l1_graph(model.visual_relation_head(enc), rel_target);
    auto mlm = masked_token_loss_graph(gather_rows(model.mlm_head(enc, true), txt_rows), txt_targets);
    auto kl = mean_all(kl_rows_graph(model.semantic_relation_head(enc, valid), sem_target));
    return add(add(mim, scale(rel, cfg.w_score)), add(mlm, scale(kl, cfg.w_kl)));
  };
  auto rec_objective = [&]() -> ValuePtr {
    auto enc = model.encode_pair(patches, ids);
    auto rec = model.rec_head(enc);
    return rec_loss_graph(rec.boxes, gt_boxes, rec.sim_sigmoid, raster, cfg.weights);
  };
  auto res_objective = [&]() -> ValuePtr {
    auto enc = model.encode_pair(patches, ids);
    return res_loss_graph(model.res_head(enc), seg, cfg.weights);
  };

  struct NamedLoss {
    const char* name;
    std::function<ValuePtr()> build;
  };
  const std::vector<NamedLoss> losses = {
      {"mrefm", mrefm_loss}, {"rec", rec_objective}, {"res", res_objective}};

  GradCheckReport report;
  report.n_params = store.num_trainable_scalars();
  const double eps = 1e-5;
  for (const auto& named : losses) {
    store.zero_grads();
    backward(named.build());
    // Snapshot analytic grads.
    std::vector<std::pair<std::string, Tensor>> analytic;
    for (const auto& [name, p] : store.trainable()) analytic.emplace_back(name, p->grad);

    for (auto& [name, grad] : analytic) {
      auto p = store.get(name);
      GradCheckEntry entry;
      entry.loss = named.name;
      entry.tensor = name;
      bool any_signal = false;
      for (int64_t i = 0; i < p->data.size(); ++i) {
        const double old = p->data.data[i];
        p->data.data[i] = old + eps;
        const double up = named.build()->scalar();
        p->data.data[i] = old - eps;
        const double down = named.build()->scalar();
        p->data.data[i] = old;
        const double fd = (up - down) / (2.0 * eps);
        const double ad = grad.data[i];
        if (std::abs(fd) > 1e-12 || std::abs(ad) > 1e-12) any_signal = true;
        const double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
        entry.max_rel_err = std::max(entry.max_rel_err, err);
      }
      entry.dead = !any_signal;
      report.entries.push_back(std::move(entry));
    }
  }
  (void)tolerance;
  return report;
}

}  // namespace oneref
