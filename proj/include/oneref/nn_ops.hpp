#pragma once

#include <cstdint>
#include <vector>

#include "oneref/autodiff.hpp"

namespace oneref {

// Row-wise layer normalization with affine gain/bias ([1,D] each).
ValuePtr layernorm_rows(const ValuePtr& x, const ValuePtr& gain, const ValuePtr& bias,
                        double eps = 1e-5);

// Multi-head attention core over batch-major sequences: q/k/v are [B*S, D],
// sample b occupies rows [b*S, (b+1)*S). key_keep has one entry per row;
// 0 marks keys (padding) that must not be attended.
ValuePtr mha_core(const ValuePtr& q, const ValuePtr& k, const ValuePtr& v, int64_t batch,
                  int64_t seq_len, int64_t heads, const std::vector<uint8_t>& key_keep);

// Embedding lookup: out.row(i) = table.row(ids[i]).
ValuePtr embedding_lookup(const ValuePtr& table, std::vector<int64_t> ids);

// Per-row negative log-likelihood of the target class, values capped at
// `cap` (gradient is zero where the cap binds). Returns [n,1].
ValuePtr cross_entropy_rows(const ValuePtr& logits, std::vector<int64_t> targets,
                            double cap = 30.0);

// Cosine similarity of every row of x against the single row e ([1,D]).
ValuePtr cosine_rows(const ValuePtr& x, const ValuePtr& e);

// Grouped variant: row (b*group + s) of x is compared against row b of e.
ValuePtr cosine_rows_grouped(const ValuePtr& x, const ValuePtr& e, int64_t group_size);

// Positional-table broadcast: x is [B*S, D], t is [S, D]; adds t to every
// sample's block of rows.
ValuePtr add_tiled(const ValuePtr& x, const ValuePtr& t);

// Repeat each row of e ([B, D]) group_size times -> [B*group_size, D].
ValuePtr repeat_rows_grouped(const ValuePtr& e, int64_t group_size);

// Sum consecutive groups of group_size rows -> [B, D].
ValuePtr sum_rows_grouped(const ValuePtr& x, int64_t group_size);

// ---------------------------------------------------------------------------
// Transposed convolution (col2im formulation). The matmul producing
// [in_cells, k*k*C_out] is done with matmul(); the scatter below places each
// kernel tap at its output cell. Output spatial size:
// out = (in - 1) * stride - 2 * pad + kernel.
struct TConvPlan {
  int64_t in_h = 0, in_w = 0;
  int64_t out_h = 0, out_w = 0;
  int64_t kernel = 0, stride = 0, pad = 0;
  std::vector<int32_t> target;  // per (in_cell * k*k + tap): output cell or -1
};

TConvPlan make_tconv_plan(int64_t in_h, int64_t in_w, int64_t kernel, int64_t stride, int64_t pad);

// y: [in_h*in_w, k*k*C]; returns [out_h*out_w, C].
ValuePtr tconv_scatter(const ValuePtr& y, const TConvPlan& plan, int64_t channels);

// Bilinear 2x upsample of an h x w map with C channels (rows are cells,
// row-major). align_corners = false convention.
ValuePtr bilinear_up2(const ValuePtr& x, int64_t h, int64_t w);

// Batched single-channel variant: every row of x is one flat h x w image;
// returns [n, 4*h*w].
ValuePtr bilinear_up2_rows(const ValuePtr& x, int64_t h, int64_t w);

}  // namespace oneref
