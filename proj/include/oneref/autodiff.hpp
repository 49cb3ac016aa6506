#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "oneref/tensor.hpp"

namespace oneref {

// One node of the reverse-mode graph. Ops below build nodes; backward()
// zeroes intermediate grads, seeds the scalar root with 1 and accumulates
// dRoot/dLeaf into every requires_grad leaf (repeated calls accumulate).
struct Value {
  Tensor data;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Value>> parents;
  std::function<void()> backward_fn;

  int64_t rows() const { return data.rows; }
  int64_t cols() const { return data.cols; }
  bool is_leaf() const { return parents.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad = Tensor(data.rows, data.cols);
  }
  void zero_grad() {
    ensure_grad();
    grad.data.setZero();
  }
  double scalar() const { return data.data[0]; }
};

using ValuePtr = std::shared_ptr<Value>;

ValuePtr constant(Tensor t);
ValuePtr leaf(Tensor t, bool requires_grad);

void backward(const ValuePtr& root);

// ---- elementwise / broadcast ----
ValuePtr add(const ValuePtr& a, const ValuePtr& b);
ValuePtr sub(const ValuePtr& a, const ValuePtr& b);
ValuePtr mul(const ValuePtr& a, const ValuePtr& b);
ValuePtr add_rowvec(const ValuePtr& a, const ValuePtr& v);   // v: [1,D]
ValuePtr mul_colvec(const ValuePtr& a, const ValuePtr& s);   // s: [n,1]
ValuePtr scale(const ValuePtr& a, double c);
ValuePtr add_const(const ValuePtr& a, double c);
ValuePtr square(const ValuePtr& a);
ValuePtr abs_val(const ValuePtr& a);
ValuePtr min_ew(const ValuePtr& a, const ValuePtr& b);
ValuePtr max_ew(const ValuePtr& a, const ValuePtr& b);
ValuePtr clamp_min(const ValuePtr& a, double c);
ValuePtr clamp_max(const ValuePtr& a, double c);
ValuePtr pow_const(const ValuePtr& a, double p);   // a >= 0 expected
ValuePtr log_clamped(const ValuePtr& a, double eps = 1e-12);
ValuePtr divide(const ValuePtr& a, const ValuePtr& b);  // elementwise, b != 0

// ---- activations ----
ValuePtr gelu(const ValuePtr& a);
ValuePtr sigmoid(const ValuePtr& a);
ValuePtr softplus(const ValuePtr& a);
ValuePtr relu(const ValuePtr& a);

// ---- linear algebra ----
ValuePtr matmul(const ValuePtr& a, const ValuePtr& b, bool trans_a = false, bool trans_b = false);

// ---- shape ----
ValuePtr slice_cols(const ValuePtr& a, int64_t c0, int64_t c1);
ValuePtr concat_cols(const std::vector<ValuePtr>& parts);
ValuePtr concat_rows(const std::vector<ValuePtr>& parts);
ValuePtr gather_rows(const ValuePtr& a, std::vector<int64_t> idx);
// Inverse of a row partition: parts[i] supplies the rows listed in idx[i].
ValuePtr combine_rows(int64_t n_rows, const std::vector<ValuePtr>& parts,
                      std::vector<std::vector<int64_t>> idx);
ValuePtr reshape_copy(const ValuePtr& a, int64_t r, int64_t c);

// ---- reductions / softmax ----
ValuePtr sum_all(const ValuePtr& a);
ValuePtr mean_all(const ValuePtr& a);
ValuePtr row_sums(const ValuePtr& a);  // [n,1]
// softmax over each row; optional additive mask (e.g. -1e30 at invalid cells).
ValuePtr softmax_rows(const ValuePtr& a, const Tensor* additive_mask = nullptr);

}  // namespace oneref
