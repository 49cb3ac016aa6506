#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oneref/data.hpp"
#include "oneref/losses.hpp"
#include "oneref/masking.hpp"
#include "oneref/metrics.hpp"
#include "oneref/model.hpp"

namespace oneref {

// Flat key=value training configuration. Core keys: the MaskingConfig,
// LossWeights and ModelConfig fields plus lr, epochs, batch, seed, task.
// The remaining knobs (ablation switches, term weights, optimizer extras)
// are documented in the README and default to the values below.
struct TrainConfig {
  ModelConfig model;
  MaskingConfig masking;
  LossWeights weights;
  double lr = 5e-4;
  int epochs = 30;
  int batch = 32;
  uint64_t seed = 0;
  std::string task = "pretrain";  // warmup|pretrain|rec|res

  // Extras.
  double weight_decay = 0.5e-5;
  double temperature = 1.0;        // semantic-score softmax temperature
  double lambda_reg = 1.0;
  double lambda_img = 1.0;
  double w_score = 1.0;            // relation-term weight in the image objective
  double w_kl = 1.0;               // KL-term weight in the text objective
  double contrastive_temp = 0.1;   // warmup InfoNCE temperature
  int ref_mim = 1;                 // 0 = vanilla image modeling
  int ref_mlm = 1;                 // 0 = vanilla language modeling
  std::string image_masking = "referring";  // referring|random|block
  std::string text_masking = "referring";   // referring|random
  double vanilla_mask_ratio = 0.4;          // ratio for random/block image masking
  int init_from_teacher = 1;

  std::string serialize() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::string& path);
  void save(const std::string& path) const;
};

// Cosine schedule without warmup.
double cosine_lr(double base_lr, int64_t step, int64_t total_steps);

// Deterministic codebook over per-patch mean RGB of the train split.
VisualTokenizer build_visual_tokenizer(const Corpus& corpus, int patch, int k, uint64_t seed);

// Image-text contrastive warmup. Writes the frozen teacher checkpoint and a
// step,loss_total CSV; throws TeacherGateFailed if in-batch top-1 retrieval
// on val stays below 0.9.
void warmup_teacher(const TrainConfig& cfg, const Corpus& corpus, const std::string& out_ckpt,
                    const std::string& log_csv);

// Mask-then-predict pretraining against the frozen teacher. CSV columns:
// step,loss_total,loss_mim,loss_rel_v,loss_mlm,loss_kl.
void pretrain_mrefm(const TrainConfig& cfg, const Corpus& corpus, const std::string& teacher_ckpt,
                    const std::string& out_ckpt, const std::string& log_csv);

// REC/RES transfer from a pretrained checkpoint (empty init_ckpt = from
// scratch). Keeps the best-val checkpoint. CSV columns:
// step,loss_total,loss_l1,loss_giou,loss_focal,loss_dice.
void finetune(const TrainConfig& cfg, const Corpus& corpus, const std::string& task,
              const std::string& init_ckpt, const std::string& out_ckpt,
              const std::string& log_csv);

// Unit-normalized aggregated visual tokens of the region crop (re-encoded at
// full input size) and of the whole image: (e_cls_region, e_cls_image).
std::pair<Tensor, Tensor> teacher_region_embedding(const OneRefModel& teacher,
                                                   const ImageU8& image, const Box& box);

// Evaluates a checkpointed model on one split.
EvalReport evaluate_checkpoint(const std::string& ckpt, const Corpus& corpus,
                               const std::vector<RefSample>& split, const std::string& task,
                               int batch);
EvalReport evaluate_model(const OneRefModel& model, const Corpus& corpus,
                          const std::vector<RefSample>& split, const std::string& task, int batch);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking of the composite objectives at micro
// scale (<= 5k parameters).

struct GradCheckEntry {
  std::string loss;
  std::string tensor;
  double max_rel_err = 0.0;
  bool dead = false;  // analytic and numeric gradients both all-zero
};

struct GradCheckReport {
  int64_t n_params = 0;
  std::vector<GradCheckEntry> entries;
  double worst_rel_err() const;
  std::string serialize() const;
};

// Micro configuration used when the config file does not override it.
ModelConfig micro_model_config();

GradCheckReport grad_check(const TrainConfig& cfg, double tolerance = 1e-3);

}  // namespace oneref
