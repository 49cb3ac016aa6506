#include "oneref/scores.hpp"

#include <cmath>

#include "oneref/error.hpp"

namespace oneref {

VisualRelationScore visual_target_relation(const PatchGrid& grid, const Box& box) {
  const double W = grid.image_w, H = grid.image_h, P = grid.patch;
  const double w_px = box.w_r * W;
  const double h_px = box.h_r * H;
  if (w_px <= 0.0 || h_px <= 0.0)
    fail("ZeroSizeRegion", "box " + std::to_string(w_px) + "x" + std::to_string(h_px) + " px");
  const double cx_px = box.x_c * W;
  const double cy_px = box.y_c * H;
  const double pw = P / w_px;
  const double ph = P / h_px;

  VisualRelationScore score;
  score.values = Tensor(grid.num_patches(), 4);
  for (uint32_t row = 0; row < grid.grid_h; ++row) {
    for (uint32_t col = 0; col < grid.grid_w; ++col) {
      const int64_t i = int64_t(row) * grid.grid_w + col;
      const double x = (col + 0.5) * P;
      const double y = (row + 0.5) * P;
      score.values.at(i, 0) = (x - cx_px) / W;
      score.values.at(i, 1) = (y - cy_px) / H;
      score.values.at(i, 2) = pw;
      score.values.at(i, 3) = ph;
    }
  }
  return score;
}

namespace {

Eigen::ArrayXd cosine_to_rows(const Tensor& word_tokens, const Tensor& e) {
  const int64_t m = word_tokens.rows;
  const double en = e.mat().row(0).norm();
  if (en < 1e-12) fail("ZeroVector", "embedding has zero norm");
  Eigen::ArrayXd out(m);
  for (int64_t i = 0; i < m; ++i) {
    const double wn = word_tokens.mat().row(i).norm();
    if (wn < 1e-12) fail("ZeroVector", "word token " + std::to_string(i) + " has zero norm");
    out[i] = word_tokens.mat().row(i).dot(e.mat().row(0)) / (wn * en);
  }
  return out;
}

Eigen::ArrayXd softmax(const Eigen::ArrayXd& x) {
  Eigen::ArrayXd e = (x - x.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

SemanticRelationScore semantic_target_relation(const Tensor& word_tokens,
                                               const Tensor& e_cls_region,
                                               const Tensor& e_cls_image, double lambda_reg,
                                               double lambda_img, double temperature) {
  if (word_tokens.cols != e_cls_region.cols || word_tokens.cols != e_cls_image.cols ||
      e_cls_region.rows != 1 || e_cls_image.rows != 1)
    fail("ShapeMismatch", "semantic_target_relation dims w" + word_tokens.shape_str() + " reg" +
                              e_cls_region.shape_str() + " img" + e_cls_image.shape_str());
  if (lambda_reg + lambda_img <= 0.0)
    fail("InvalidWeights", "lambda_reg + lambda_img must be positive");
  if (temperature <= 0.0) fail("InvalidWeights", "temperature must be positive");

  const Eigen::ArrayXd cos_reg = cosine_to_rows(word_tokens, e_cls_region) / temperature;
  const Eigen::ArrayXd cos_img = cosine_to_rows(word_tokens, e_cls_image) / temperature;
  Eigen::ArrayXd s = lambda_reg * softmax(cos_reg) + lambda_img * softmax(cos_img);
  s /= lambda_reg + lambda_img;

  SemanticRelationScore score;
  score.values = Tensor(word_tokens.rows, 1);
  for (int64_t i = 0; i < word_tokens.rows; ++i) score.values.data[i] = s[i];
  return score;
}

}  // namespace oneref
