#include "oneref/losses.hpp"

#include <cmath>

#include "oneref/error.hpp"
#include "oneref/nn_ops.hpp"

namespace oneref {

namespace {

double nll_of_row(const Tensor& logits, int64_t row, int64_t target) {
  Eigen::ArrayXd r = logits.mat().row(row).array();
  const double m = r.maxCoeff();
  const double lse = std::log((r - m).exp().sum()) + m;
  return std::min(lse - r[target], kNllCap);
}

double masked_token_loss(const Tensor& logits, const std::vector<int64_t>& targets,
                         const char* which) {
  if (logits.rows == 0) fail("EmptyMaskSet", std::string(which) + " with no masked positions");
  if (static_cast<int64_t>(targets.size()) != logits.rows)
    fail("ShapeMismatch", std::string(which) + " targets " + std::to_string(targets.size()) +
                              " vs logits " + logits.shape_str());
  double total = 0.0;
  for (int64_t r = 0; r < logits.rows; ++r) {
    if (targets[r] < 0 || targets[r] >= logits.cols) fail("ShapeMismatch", "target id out of range");
    total += nll_of_row(logits, r, targets[r]);
  }
  return total / static_cast<double>(logits.rows);
}

double huber(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

}  // namespace

double mim_loss(const Tensor& logits, const std::vector<int64_t>& targets) {
  return masked_token_loss(logits, targets, "mim_loss");
}

double mlm_loss(const Tensor& logits, const std::vector<int64_t>& targets) {
  return masked_token_loss(logits, targets, "mlm_loss");
}

double smooth_l1(const Tensor& pred, const Tensor& target, double beta_h) {
  if (!pred.same_shape(target))
    fail("ShapeMismatch", "smooth_l1 " + pred.shape_str() + " vs " + target.shape_str());
  if (beta_h <= 0.0) fail("ShapeMismatch", "smooth_l1 beta must be > 0");
  double total = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) total += huber(pred.data[i] - target.data[i], beta_h);
  return total / static_cast<double>(pred.size());
}

double focal_loss(const Tensor& pred_prob, const std::vector<uint8_t>& target, double gamma_f,
                  double alpha_f) {
  if (static_cast<int64_t>(target.size()) != pred_prob.size())
    fail("ShapeMismatch", "focal target size " + std::to_string(target.size()) + " vs " +
                              pred_prob.shape_str());
  double total = 0.0;
  for (int64_t i = 0; i < pred_prob.size(); ++i) {
    const double p = std::min(1.0 - kProbEps, std::max(kProbEps, pred_prob.data[i]));
    const double pt = target[i] ? p : 1.0 - p;
    total += -alpha_f * std::pow(1.0 - pt, gamma_f) * std::log(pt);
  }
  return total / static_cast<double>(pred_prob.size());
}

double dice_loss(const Tensor& pred_prob, const std::vector<uint8_t>& target, double smooth) {
  if (static_cast<int64_t>(target.size()) != pred_prob.size())
    fail("ShapeMismatch", "dice target size " + std::to_string(target.size()) + " vs " +
                              pred_prob.shape_str());
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (int64_t i = 0; i < pred_prob.size(); ++i) {
    const double p = pred_prob.data[i];
    const double t = target[i] ? 1.0 : 0.0;
    inter += p * t;
    psum += p;
    tsum += t;
  }
  return 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
}

double kl_divergence(const Tensor& target_dist, const Tensor& predicted_dist) {
  if (!target_dist.same_shape(predicted_dist))
    fail("ShapeMismatch", "kl " + target_dist.shape_str() + " vs " + predicted_dist.shape_str());
  const double psum = predicted_dist.data.sum();
  if (std::abs(psum - 1.0) > 1e-6)
    fail("InvalidDistribution", "predicted distribution sums to " + std::to_string(psum));
  double kl = 0.0;
  for (int64_t i = 0; i < target_dist.size(); ++i) {
    const double t = target_dist.data[i];
    if (t <= 0.0) continue;
    const double p = std::max(predicted_dist.data[i], 1e-12);
    kl += t * (std::log(t) - std::log(p));
  }
  return kl;
}

double referring_mim_loss(const Tensor& token_logits, const std::vector<int64_t>& token_targets,
                          const Tensor& predicted_scores, const Tensor& target_scores,
                          double w_token, double w_score, double huber_beta) {
  if (!predicted_scores.same_shape(target_scores))
    fail("ShapeMismatch", "relation scores " + predicted_scores.shape_str() + " vs " +
                              target_scores.shape_str());
  const double token_term = mim_loss(token_logits, token_targets);
  const double score_term = smooth_l1(predicted_scores, target_scores, huber_beta);
  return w_token * token_term + w_score * score_term;
}

double referring_mlm_loss(const Tensor& token_logits, const std::vector<int64_t>& token_targets,
                          const Tensor& predicted_dist, const Tensor& target_dist, double w_token,
                          double w_kl) {
  const double token_term = mlm_loss(token_logits, token_targets);
  const double kl_term = kl_divergence(target_dist, predicted_dist);
  return w_token * token_term + w_kl * kl_term;
}

double rec_loss(const Box& pred_box, const Box& gt_box, const Tensor& sim_mask_sigmoid,
                const MaskPlan& box_raster, const LossWeights& w) {
  if (sim_mask_sigmoid.size() != static_cast<int64_t>(box_raster.size()))
    fail("ShapeMismatch", "similarity mask " + sim_mask_sigmoid.shape_str() + " vs raster " +
                              std::to_string(box_raster.size()));
  Tensor pred(1, 4), gt(1, 4);
  pred.data << pred_box.x_c, pred_box.y_c, pred_box.w_r, pred_box.h_r;
  gt.data << gt_box.x_c, gt_box.y_c, gt_box.w_r, gt_box.h_r;
  const double l1 = smooth_l1(pred, gt);
  const double g = 1.0 - giou(pred_box, gt_box);
  const double f = focal_loss(sim_mask_sigmoid, box_raster.cells);
  const double d = dice_loss(sim_mask_sigmoid, box_raster.cells);
  return w.lambda_l1 * l1 + w.lambda_giou * g + w.lambda_f_box * f + w.lambda_d_box * d;
}

double res_loss(const Tensor& pred_mask_prob, const std::vector<uint8_t>& gt_mask,
                const LossWeights& w) {
  const double f = focal_loss(pred_mask_prob, gt_mask);
  const double d = dice_loss(pred_mask_prob, gt_mask);
  return w.lambda_f_seg * f + w.lambda_d_seg * d;
}

// ---------------------------------------------------------------------------
// graph forms

ValuePtr masked_token_loss_graph(const ValuePtr& logits, const std::vector<int64_t>& targets) {
  if (logits->rows() == 0) fail("EmptyMaskSet", "token loss with no masked positions");
  auto nll = cross_entropy_rows(logits, targets, kNllCap);
  return mean_all(nll);
}

ValuePtr smooth_l1_graph(const ValuePtr& pred, const Tensor& target, double beta_h) {
  if (!pred->data.same_shape(target))
    fail("ShapeMismatch", "smooth_l1 " + pred->data.shape_str() + " vs " + target.shape_str());
  auto d = sub(pred, constant(target));
  auto a = abs_val(d);
  auto q = clamp_max(a, beta_h);
  auto lin = sub(a, q);
  auto quad = scale(square(q), 0.5 / beta_h);
  return mean_all(add(quad, lin));
}

ValuePtr focal_graph(const ValuePtr& pred_prob, const Tensor& target01, double gamma_f,
                     double alpha_f) {
  if (!pred_prob->data.same_shape(target01))
    fail("ShapeMismatch", "focal " + pred_prob->data.shape_str() + " vs " + target01.shape_str());
  auto p = clamp_max(clamp_min(pred_prob, kProbEps), 1.0 - kProbEps);
  // p_t = t*p + (1-t)*(1-p)
  Tensor ones = Tensor::full(target01.rows, target01.cols, 1.0);
  Tensor one_minus_t(target01.rows, target01.cols);
  one_minus_t.data = 1.0 - target01.data;
  auto pt = add(mul(p, constant(target01)),
                mul(sub(constant(ones), p), constant(one_minus_t)));
  auto one_minus_pt = sub(constant(ones), pt);
  auto weight = pow_const(one_minus_pt, gamma_f);
  auto logpt = log_clamped(pt, 1e-300);
  return scale(mean_all(mul(weight, logpt)), -alpha_f);
}

ValuePtr dice_graph(const ValuePtr& pred_prob, const Tensor& target01, double smooth) {
  if (!pred_prob->data.same_shape(target01))
    fail("ShapeMismatch", "dice " + pred_prob->data.shape_str() + " vs " + target01.shape_str());
  auto inter = row_sums(mul(pred_prob, constant(target01)));         // [n,1]
  auto psum = row_sums(pred_prob);                                   // [n,1]
  Tensor tsum(target01.rows, 1);
  tsum.mat().col(0) = target01.mat().rowwise().sum();
  auto num = add_const(scale(inter, 2.0), smooth);
  auto den = add_const(add(psum, constant(tsum)), smooth);
  auto ones = constant(Tensor::full(target01.rows, 1, 1.0));
  return mean_all(sub(ones, divide(num, den)));
}

ValuePtr kl_rows_graph(const ValuePtr& predicted_dist, const Tensor& target_dist) {
  if (!predicted_dist->data.same_shape(target_dist))
    fail("ShapeMismatch", "kl " + predicted_dist->data.shape_str() + " vs " + target_dist.shape_str());
  Tensor t_logt(target_dist.rows, target_dist.cols);
  double entropy_guard = 0.0;
  (void)entropy_guard;
  for (int64_t i = 0; i < target_dist.size(); ++i) {
    const double t = target_dist.data[i];
    t_logt.data[i] = t > 0.0 ? t * std::log(t) : 0.0;
  }
  // KL = sum t*ln t - sum t*ln p; zero-target cells contribute nothing.
  auto logp = log_clamped(predicted_dist, 1e-12);
  auto cross = mul(constant(target_dist), logp);
  Tensor row_entropy(target_dist.rows, 1);
  row_entropy.mat().col(0) = t_logt.mat().rowwise().sum();
  return sub(constant(row_entropy), row_sums(cross));
}

ValuePtr giou_rows_graph(const ValuePtr& pred_boxes, const Tensor& gt_boxes) {
  if (pred_boxes->cols() != 4 || !pred_boxes->data.same_shape(gt_boxes))
    fail("ShapeMismatch", "giou boxes " + pred_boxes->data.shape_str() + " vs " + gt_boxes.shape_str());
  const int64_t n = gt_boxes.rows;

  auto xc = slice_cols(pred_boxes, 0, 1);
  auto yc = slice_cols(pred_boxes, 1, 2);
  auto w = slice_cols(pred_boxes, 2, 3);
  auto h = slice_cols(pred_boxes, 3, 4);
  auto x1 = sub(xc, scale(w, 0.5));
  auto x2 = add(xc, scale(w, 0.5));
  auto y1 = sub(yc, scale(h, 0.5));
  auto y2 = add(yc, scale(h, 0.5));

  Tensor gx1(n, 1), gx2(n, 1), gy1(n, 1), gy2(n, 1), garea(n, 1);
  for (int64_t i = 0; i < n; ++i) {
    const double cx = gt_boxes.at(i, 0), cy = gt_boxes.at(i, 1);
    const double gw = gt_boxes.at(i, 2), gh = gt_boxes.at(i, 3);
    gx1.data[i] = cx - 0.5 * gw;
    gx2.data[i] = cx + 0.5 * gw;
    gy1.data[i] = cy - 0.5 * gh;
    gy2.data[i] = cy + 0.5 * gh;
    garea.data[i] = gw * gh;
  }
  auto cgx1 = constant(gx1), cgx2 = constant(gx2), cgy1 = constant(gy1), cgy2 = constant(gy2);

  auto iw = clamp_min(sub(min_ew(x2, cgx2), max_ew(x1, cgx1)), 0.0);
  auto ih = clamp_min(sub(min_ew(y2, cgy2), max_ew(y1, cgy1)), 0.0);
  auto inter = mul(iw, ih);
  auto uni = sub(add(mul(w, h), constant(garea)), inter);
  auto iou_v = divide(inter, uni);
  auto ew = sub(max_ew(x2, cgx2), min_ew(x1, cgx1));
  auto eh = sub(max_ew(y2, cgy2), min_ew(y1, cgy1));
  auto enc = clamp_min(mul(ew, eh), 1e-12);
  return sub(iou_v, divide(sub(enc, uni), enc));
}

ValuePtr rec_loss_graph(const ValuePtr& pred_boxes, const Tensor& gt_boxes,
                        const ValuePtr& sim_sigmoid, const Tensor& raster, const LossWeights& w) {
  auto l1 = smooth_l1_graph(pred_boxes, gt_boxes);
  auto giou_col = giou_rows_graph(pred_boxes, gt_boxes);
  Tensor ones = Tensor::full(giou_col->rows(), 1, 1.0);
  auto giou_term = mean_all(sub(constant(ones), giou_col));
  auto f = focal_graph(sim_sigmoid, raster);
  auto d = dice_graph(sim_sigmoid, raster);
  auto total = add(scale(l1, w.lambda_l1), scale(giou_term, w.lambda_giou));
  total = add(total, scale(f, w.lambda_f_box));
  return add(total, scale(d, w.lambda_d_box));
}

ValuePtr res_loss_graph(const ValuePtr& pred_mask_prob, const Tensor& gt_mask,
                        const LossWeights& w) {
  auto f = focal_graph(pred_mask_prob, gt_mask);
  auto d = dice_graph(pred_mask_prob, gt_mask);
  return add(scale(f, w.lambda_f_seg), scale(d, w.lambda_d_seg));
}

}  // namespace oneref
