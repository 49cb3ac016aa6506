#pragma once

#include <vector>

#include "oneref/autodiff.hpp"
#include "oneref/geometry.hpp"
#include "oneref/mask_plan.hpp"
#include "oneref/tensor.hpp"

namespace oneref {

// Loss term weights; defaults follow the training hyperparameter table
// (l1/giou 2, focal 20, dice 2 for both the box constraint and segmentation).
struct LossWeights {
  double lambda_l1 = 2.0;
  double lambda_giou = 2.0;
  double lambda_f_box = 20.0;
  double lambda_d_box = 2.0;
  double lambda_f_seg = 20.0;
  double lambda_d_seg = 2.0;
};

// Per-element NLL values are capped here to keep degenerate logits finite.
constexpr double kNllCap = 30.0;
constexpr double kProbEps = 1e-7;

// ---------------------------------------------------------------------------
// Scalar forms. These are plain recomputations used directly by tests and as
// the independent cross-check of the graph forms below.

// Mean NLL over masked positions; logits is |M|x K. Throws EmptyMaskSet.
double mim_loss(const Tensor& logits, const std::vector<int64_t>& targets);
double mlm_loss(const Tensor& logits, const std::vector<int64_t>& targets);

// Mean Huber over all elements.
double smooth_l1(const Tensor& pred, const Tensor& target, double beta_h = 1.0);

// Mean of -alpha * (1 - p_t)^gamma * log(p_t); p clamped to [eps, 1-eps].
double focal_loss(const Tensor& pred_prob, const std::vector<uint8_t>& target, double gamma_f = 2.0,
                  double alpha_f = 0.25);

// 1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth).
double dice_loss(const Tensor& pred_prob, const std::vector<uint8_t>& target, double smooth = 1.0);

// KL(target || predicted), predicted validated to sum to 1 +- 1e-6.
double kl_divergence(const Tensor& target_dist, const Tensor& predicted_dist);

// Token CE over masked positions plus mean Huber over the N_v x 4 scores.
double referring_mim_loss(const Tensor& token_logits, const std::vector<int64_t>& token_targets,
                          const Tensor& predicted_scores, const Tensor& target_scores,
                          double w_token = 1.0, double w_score = 1.0, double huber_beta = 1.0);

// Token CE over masked positions plus KL over the full position distribution.
double referring_mlm_loss(const Tensor& token_logits, const std::vector<int64_t>& token_targets,
                          const Tensor& predicted_dist, const Tensor& target_dist,
                          double w_token = 1.0, double w_kl = 1.0);

// Grounding loss: l1 + giou terms plus focal/dice box-mask constraints on the
// sigmoid-activated similarity map against the rasterized ground-truth box.
double rec_loss(const Box& pred_box, const Box& gt_box, const Tensor& sim_mask_sigmoid,
                const MaskPlan& box_raster, const LossWeights& w);

// Segmentation loss: focal + dice on the full-resolution mask.
double res_loss(const Tensor& pred_mask_prob, const std::vector<uint8_t>& gt_mask,
                const LossWeights& w);

// ---------------------------------------------------------------------------
// Graph forms (used by training; values match the scalar forms bit-for-bit
// on identical inputs up to summation order).

ValuePtr masked_token_loss_graph(const ValuePtr& logits, const std::vector<int64_t>& targets);
ValuePtr smooth_l1_graph(const ValuePtr& pred, const Tensor& target, double beta_h = 1.0);
ValuePtr focal_graph(const ValuePtr& pred_prob, const Tensor& target01, double gamma_f = 2.0,
                     double alpha_f = 0.25);
// Mean over rows of per-row dice (each row is one mask pair).
ValuePtr dice_graph(const ValuePtr& pred_prob, const Tensor& target01, double smooth = 1.0);
// Row-wise KL(target || pred): target rows may be zero-padded. Returns [n,1].
ValuePtr kl_rows_graph(const ValuePtr& predicted_dist, const Tensor& target_dist);
// Per-row GIoU of center-format boxes pred [n,4] against constant gt [n,4].
ValuePtr giou_rows_graph(const ValuePtr& pred_boxes, const Tensor& gt_boxes);

// Batched REC objective; pred_boxes [B,4], sim_sigmoid [B, h*w].
ValuePtr rec_loss_graph(const ValuePtr& pred_boxes, const Tensor& gt_boxes,
                        const ValuePtr& sim_sigmoid, const Tensor& raster, const LossWeights& w);

// Batched RES objective; pred [B, H*W].
ValuePtr res_loss_graph(const ValuePtr& pred_mask_prob, const Tensor& gt_mask,
                        const LossWeights& w);

}  // namespace oneref
