#pragma once

#include "oneref/geometry.hpp"
#include "oneref/tensor.hpp"

namespace oneref {

// Per-patch reconstruction target of the referring image objective: columns
// are (dx, dy, pw, ph) with dx = (x - x_c)/W, dy = (y - y_c)/H measured at
// patch centers, and pw = P/w_r, ph = P/h_r in pixels.
struct VisualRelationScore {
  Tensor values;  // N_v x 4, row-major over the patch grid
};

// Per-token probability of relevance to the referred region (sums to 1).
struct SemanticRelationScore {
  Tensor values;  // M x 1
};

// box is normalized center-format; pixel quantities derive from the grid.
// Throws ZeroSizeRegion when the box has zero pixel width or height.
VisualRelationScore visual_target_relation(const PatchGrid& grid, const Box& box);

// Weighted sum of softmax-normalized cosine similarities of each word token
// against the region and whole-image teacher embeddings, renormalized by
// (lambda_reg + lambda_img) so the result is a distribution.
// word_tokens: M x D; e_cls_region / e_cls_image: 1 x D.
SemanticRelationScore semantic_target_relation(const Tensor& word_tokens,
                                               const Tensor& e_cls_region,
                                               const Tensor& e_cls_image, double lambda_reg,
                                               double lambda_img, double temperature = 1.0);

}  // namespace oneref
