#include "oneref/autodiff.hpp"

#include <cmath>
#include <unordered_set>

#include "oneref/error.hpp"

namespace oneref {

namespace {

ValuePtr make_node(Tensor data, std::vector<ValuePtr> parents) {
  auto out = std::make_shared<Value>();
  out->data = std::move(data);
  out->parents = std::move(parents);
  for (const auto& p : out->parents)
    if (p->requires_grad) out->requires_grad = true;
  return out;
}

void check_same_shape(const ValuePtr& a, const ValuePtr& b, const char* op) {
  if (!a->data.same_shape(b->data))
    fail("ShapeMismatch", std::string(op) + " " + a->data.shape_str() + " vs " + b->data.shape_str());
}

}  // namespace

ValuePtr constant(Tensor t) { return leaf(std::move(t), false); }

ValuePtr leaf(Tensor t, bool requires_grad) {
  auto v = std::make_shared<Value>();
  v->data = std::move(t);
  v->requires_grad = requires_grad;
  return v;
}

void backward(const ValuePtr& root) {
  if (!root) fail("NonScalarRoot", "null root");
  if (root->data.size() != 1) fail("NonScalarRoot", "root shape " + root->data.shape_str());

  // Iterative topological order over the reachable subgraph.
  std::vector<Value*> topo;
  std::unordered_set<Value*> seen;
  std::vector<std::pair<Value*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Value* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate grads are scratch; leaf grads accumulate across calls.
  for (Value* v : topo)
    if (!v->is_leaf()) v->zero_grad();
  root->ensure_grad();
  root->grad.data[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn && (*it)->requires_grad) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// elementwise / broadcast

ValuePtr add(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "add");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data + b->data.data;
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data; }
      if (bp->requires_grad) { bp->ensure_grad(); bp->grad.data += op->grad.data; }
    };
  }
  return out;
}

ValuePtr sub(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "sub");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data - b->data.data;
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data; }
      if (bp->requires_grad) { bp->ensure_grad(); bp->grad.data -= op->grad.data; }
    };
  }
  return out;
}

ValuePtr mul(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "mul");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data * b->data.data;
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data * bp->data.data; }
      if (bp->requires_grad) { bp->ensure_grad(); bp->grad.data += op->grad.data * ap->data.data; }
    };
  }
  return out;
}

ValuePtr add_rowvec(const ValuePtr& a, const ValuePtr& v) {
  if (v->rows() != 1 || v->cols() != a->cols())
    fail("ShapeMismatch", "add_rowvec " + a->data.shape_str() + " vs " + v->data.shape_str());
  Tensor t(a->rows(), a->cols());
  t.mat() = a->data.mat().rowwise() + v->data.mat().row(0);
  auto out = make_node(std::move(t), {a, v});
  if (out->requires_grad) {
    Value *ap = a.get(), *vp = v.get(), *op = out.get();
    out->backward_fn = [ap, vp, op] {
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data; }
      if (vp->requires_grad) {
        vp->ensure_grad();
        vp->grad.mat().row(0) += op->grad.mat().colwise().sum();
      }
    };
  }
  return out;
}

ValuePtr mul_colvec(const ValuePtr& a, const ValuePtr& s) {
  if (s->cols() != 1 || s->rows() != a->rows())
    fail("ShapeMismatch", "mul_colvec " + a->data.shape_str() + " vs " + s->data.shape_str());
  Tensor t(a->rows(), a->cols());
  t.mat() = a->data.mat().array().colwise() * s->data.mat().col(0).array();
  auto out = make_node(std::move(t), {a, s});
  if (out->requires_grad) {
    Value *ap = a.get(), *sp = s.get(), *op = out.get();
    out->backward_fn = [ap, sp, op] {
      if (ap->requires_grad) {
        ap->ensure_grad();
        ap->grad.mat().array() += op->grad.mat().array().colwise() * sp->data.mat().col(0).array();
      }
      if (sp->requires_grad) {
        sp->ensure_grad();
        sp->grad.mat().col(0) += (op->grad.mat().array() * ap->data.mat().array()).rowwise().sum().matrix();
      }
    };
  }
  return out;
}

ValuePtr scale(const ValuePtr& a, double c) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data * c;
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, c] { ap->ensure_grad(); ap->grad.data += op->grad.data * c; };
  }
  return out;
}

ValuePtr add_const(const ValuePtr& a, double c) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data + c;
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] { ap->ensure_grad(); ap->grad.data += op->grad.data; };
  }
  return out;
}

ValuePtr square(const ValuePtr& a) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.square();
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      ap->grad.data += 2.0 * op->grad.data * ap->data.data;
    };
  }
  return out;
}

ValuePtr abs_val(const ValuePtr& a) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.abs();
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      ap->grad.data += op->grad.data * ap->data.data.sign();
    };
  }
  return out;
}

ValuePtr min_ew(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "min_ew");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.min(b->data.data);
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      // Ties route to a.
      Eigen::ArrayXd take_a = (ap->data.data <= bp->data.data).cast<double>();
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data * take_a; }
      if (bp->requires_grad) { bp->ensure_grad(); bp->grad.data += op->grad.data * (1.0 - take_a); }
    };
  }
  return out;
}

ValuePtr max_ew(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "max_ew");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.max(b->data.data);
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      Eigen::ArrayXd take_a = (ap->data.data >= bp->data.data).cast<double>();
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data * take_a; }
      if (bp->requires_grad) { bp->ensure_grad(); bp->grad.data += op->grad.data * (1.0 - take_a); }
    };
  }
  return out;
}

ValuePtr clamp_min(const ValuePtr& a, double c) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.max(c);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, c] {
      ap->ensure_grad();
      ap->grad.data += op->grad.data * (ap->data.data >= c).cast<double>();
    };
  }
  return out;
}

ValuePtr clamp_max(const ValuePtr& a, double c) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.min(c);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, c] {
      ap->ensure_grad();
      ap->grad.data += op->grad.data * (ap->data.data <= c).cast<double>();
    };
  }
  return out;
}

ValuePtr pow_const(const ValuePtr& a, double p) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.pow(p);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, p] {
      ap->ensure_grad();
      if (p == 0.0) return;
      ap->grad.data += op->grad.data * p * ap->data.data.pow(p - 1.0);
    };
  }
  return out;
}

ValuePtr log_clamped(const ValuePtr& a, double eps) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.max(eps).log();
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, eps] {
      ap->ensure_grad();
      ap->grad.data +=
          op->grad.data * (ap->data.data >= eps).cast<double>() / ap->data.data.max(eps);
    };
  }
  return out;
}

ValuePtr divide(const ValuePtr& a, const ValuePtr& b) {
  check_same_shape(a, b, "divide");
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data / b->data.data;
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op] {
      if (ap->requires_grad) { ap->ensure_grad(); ap->grad.data += op->grad.data / bp->data.data; }
      if (bp->requires_grad) {
        bp->ensure_grad();
        bp->grad.data -= op->grad.data * ap->data.data / bp->data.data.square();
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

ValuePtr gelu(const ValuePtr& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  auto std_normal_cdf = [](double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); };
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data * a->data.data.unaryExpr(std_normal_cdf);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, std_normal_cdf] {
      ap->ensure_grad();
      const double inv_sqrt_2pi = 0.39894228040143267794;
      Eigen::ArrayXd cdf = ap->data.data.unaryExpr(std_normal_cdf);
      Eigen::ArrayXd pdf = inv_sqrt_2pi * (-0.5 * ap->data.data.square()).exp();
      ap->grad.data += op->grad.data * (cdf + ap->data.data * pdf);
    };
  }
  return out;
}

ValuePtr sigmoid(const ValuePtr& a) {
  Tensor t(a->rows(), a->cols());
  for (int64_t i = 0; i < t.size(); ++i) {
    const double x = a->data.data[i];
    t.data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      ap->grad.data += op->grad.data * op->data.data * (1.0 - op->data.data);
    };
  }
  return out;
}

ValuePtr softplus(const ValuePtr& a) {
  Tensor t(a->rows(), a->cols());
  t.data = a->data.data.max(0.0) + (-a->data.data.abs()).exp().log1p();
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (int64_t i = 0; i < ap->grad.size(); ++i) {
        const double x = ap->data.data[i];
        const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        ap->grad.data[i] += op->grad.data[i] * sig;
      }
    };
  }
  return out;
}

ValuePtr relu(const ValuePtr& a) { return clamp_min(a, 0.0); }

// ---------------------------------------------------------------------------
// linear algebra

ValuePtr matmul(const ValuePtr& a, const ValuePtr& b, bool trans_a, bool trans_b) {
  const int64_t am = trans_a ? a->cols() : a->rows();
  const int64_t ak = trans_a ? a->rows() : a->cols();
  const int64_t bk = trans_b ? b->cols() : b->rows();
  const int64_t bn = trans_b ? b->rows() : b->cols();
  if (ak != bk)
    fail("ShapeMismatch", "matmul " + a->data.shape_str() + (trans_a ? "^T" : "") + " x " +
                              b->data.shape_str() + (trans_b ? "^T" : ""));
  Tensor t(am, bn);
  {
    auto A = a->data.mat();
    auto B = b->data.mat();
    if (!trans_a && !trans_b) t.mat().noalias() = A * B;
    else if (trans_a && !trans_b) t.mat().noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) t.mat().noalias() = A * B.transpose();
    else t.mat().noalias() = A.transpose() * B.transpose();
  }
  auto out = make_node(std::move(t), {a, b});
  if (out->requires_grad) {
    Value *ap = a.get(), *bp = b.get(), *op = out.get();
    out->backward_fn = [ap, bp, op, trans_a, trans_b] {
      auto dC = op->grad.mat();
      if (ap->requires_grad) {
        ap->ensure_grad();
        auto B = bp->data.mat();
        if (!trans_a) {
          if (!trans_b) ap->grad.mat().noalias() += dC * B.transpose();
          else ap->grad.mat().noalias() += dC * B;
        } else {
          if (!trans_b) ap->grad.mat().noalias() += B * dC.transpose();
          else ap->grad.mat().noalias() += B.transpose() * dC.transpose();
        }
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        auto A = ap->data.mat();
        if (!trans_b) {
          if (!trans_a) bp->grad.mat().noalias() += A.transpose() * dC;
          else bp->grad.mat().noalias() += A * dC;
        } else {
          if (!trans_a) bp->grad.mat().noalias() += dC.transpose() * A;
          else bp->grad.mat().noalias() += dC.transpose() * A.transpose();
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

ValuePtr slice_cols(const ValuePtr& a, int64_t c0, int64_t c1) {
  if (c0 < 0 || c1 > a->cols() || c0 >= c1)
    fail("ShapeMismatch", "slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                              ") of " + a->data.shape_str());
  Tensor t(a->rows(), c1 - c0);
  t.mat() = a->data.mat().middleCols(c0, c1 - c0);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, c0, c1] {
      ap->ensure_grad();
      ap->grad.mat().middleCols(c0, c1 - c0) += op->grad.mat();
    };
  }
  return out;
}

ValuePtr concat_cols(const std::vector<ValuePtr>& parts) {
  if (parts.empty()) fail("ShapeMismatch", "concat_cols of nothing");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p->rows() != parts[0]->rows()) fail("ShapeMismatch", "concat_cols row mismatch");
    total += p->cols();
  }
  Tensor t(parts[0]->rows(), total);
  int64_t off = 0;
  for (const auto& p : parts) {
    t.mat().middleCols(off, p->cols()) = p->data.mat();
    off += p->cols();
  }
  auto out = make_node(std::move(t), parts);
  if (out->requires_grad) {
    Value* op = out.get();
    std::vector<Value*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    out->backward_fn = [raw, op] {
      int64_t off = 0;
      for (Value* p : raw) {
        if (p->requires_grad) {
          p->ensure_grad();
          p->grad.mat() += op->grad.mat().middleCols(off, p->cols());
        }
        off += p->cols();
      }
    };
  }
  return out;
}

ValuePtr concat_rows(const std::vector<ValuePtr>& parts) {
  if (parts.empty()) fail("ShapeMismatch", "concat_rows of nothing");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p->cols() != parts[0]->cols()) fail("ShapeMismatch", "concat_rows col mismatch");
    total += p->rows();
  }
  Tensor t(total, parts[0]->cols());
  int64_t off = 0;
  for (const auto& p : parts) {
    t.mat().middleRows(off, p->rows()) = p->data.mat();
    off += p->rows();
  }
  auto out = make_node(std::move(t), parts);
  if (out->requires_grad) {
    Value* op = out.get();
    std::vector<Value*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    out->backward_fn = [raw, op] {
      int64_t off = 0;
      for (Value* p : raw) {
        if (p->requires_grad) {
          p->ensure_grad();
          p->grad.mat() += op->grad.mat().middleRows(off, p->rows());
        }
        off += p->rows();
      }
    };
  }
  return out;
}

ValuePtr gather_rows(const ValuePtr& a, std::vector<int64_t> idx) {
  Tensor t(static_cast<int64_t>(idx.size()), a->cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a->rows()) fail("ShapeMismatch", "gather_rows index out of range");
    t.mat().row(i) = a->data.mat().row(idx[i]);
  }
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
    out->backward_fn = [ap, op, ids] {
      ap->ensure_grad();
      for (size_t i = 0; i < ids->size(); ++i)
        ap->grad.mat().row((*ids)[i]) += op->grad.mat().row(i);
    };
  }
  return out;
}

ValuePtr combine_rows(int64_t n_rows, const std::vector<ValuePtr>& parts,
                      std::vector<std::vector<int64_t>> idx) {
  if (parts.size() != idx.size()) fail("ShapeMismatch", "combine_rows parts/index mismatch");
  Tensor t(n_rows, parts.empty() ? 0 : parts[0]->cols());
  for (size_t k = 0; k < parts.size(); ++k) {
    if (static_cast<int64_t>(idx[k].size()) != parts[k]->rows())
      fail("ShapeMismatch", "combine_rows index list size");
    for (size_t i = 0; i < idx[k].size(); ++i) t.mat().row(idx[k][i]) = parts[k]->data.mat().row(i);
  }
  auto out = make_node(std::move(t), parts);
  if (out->requires_grad) {
    Value* op = out.get();
    std::vector<Value*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    auto ids = std::make_shared<std::vector<std::vector<int64_t>>>(std::move(idx));
    out->backward_fn = [raw, op, ids] {
      for (size_t k = 0; k < raw.size(); ++k) {
        if (!raw[k]->requires_grad) continue;
        raw[k]->ensure_grad();
        for (size_t i = 0; i < (*ids)[k].size(); ++i)
          raw[k]->grad.mat().row(i) += op->grad.mat().row((*ids)[k][i]);
      }
    };
  }
  return out;
}

ValuePtr reshape_copy(const ValuePtr& a, int64_t r, int64_t c) {
  if (r * c != a->data.size())
    fail("ShapeMismatch", "reshape " + a->data.shape_str() + " to [" + std::to_string(r) + "," +
                              std::to_string(c) + "]");
  Tensor t(r, c);
  t.data = a->data.data;
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      ap->grad.data += op->grad.data;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / softmax

ValuePtr sum_all(const ValuePtr& a) {
  Tensor t = Tensor::scalar(a->data.data.sum());
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] { ap->ensure_grad(); ap->grad.data += op->grad.data[0]; };
  }
  return out;
}

ValuePtr mean_all(const ValuePtr& a) {
  const double inv_n = 1.0 / static_cast<double>(a->data.size());
  Tensor t = Tensor::scalar(a->data.data.sum() * inv_n);
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op, inv_n] { ap->ensure_grad(); ap->grad.data += op->grad.data[0] * inv_n; };
  }
  return out;
}

ValuePtr row_sums(const ValuePtr& a) {
  Tensor t(a->rows(), 1);
  t.mat().col(0) = a->data.mat().rowwise().sum();
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      ap->grad.mat().colwise() += op->grad.mat().col(0);
    };
  }
  return out;
}

ValuePtr softmax_rows(const ValuePtr& a, const Tensor* additive_mask) {
  if (additive_mask && !additive_mask->same_shape(a->data))
    fail("ShapeMismatch", "softmax mask " + additive_mask->shape_str() + " vs " + a->data.shape_str());
  Tensor t(a->rows(), a->cols());
  {
    auto src = a->data.mat();
    for (int64_t r = 0; r < a->rows(); ++r) {
      Eigen::ArrayXd row = src.row(r).array();
      if (additive_mask) row += additive_mask->mat().row(r).array();
      const double m = row.maxCoeff();
      Eigen::ArrayXd e = (row - m).exp();
      t.mat().row(r) = (e / e.sum()).matrix();
    }
  }
  auto out = make_node(std::move(t), {a});
  if (out->requires_grad) {
    Value *ap = a.get(), *op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (int64_t r = 0; r < ap->rows(); ++r) {
        Eigen::ArrayXd y = op->data.mat().row(r).array();
        Eigen::ArrayXd dy = op->grad.mat().row(r).array();
        const double dot = (y * dy).sum();
        ap->grad.mat().row(r) += ((dy - dot) * y).matrix();
      }
    };
  }
  return out;
}

}  // namespace oneref
