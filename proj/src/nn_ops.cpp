#include "oneref/nn_ops.hpp"

#include <array>
#include <cmath>
#include <memory>

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

}  // namespace

ValuePtr layernorm_rows(const ValuePtr& x, const ValuePtr& gain, const ValuePtr& bias, double eps) {
  const int64_t n = x->rows(), d = x->cols();
  if (gain->rows() != 1 || gain->cols() != d || bias->rows() != 1 || bias->cols() != d)
    fail("ShapeMismatch", "layernorm affine " + gain->data.shape_str() + "/" +
                              bias->data.shape_str() + " for " + x->data.shape_str());
  Tensor t(n, d);
  auto x_hat = std::make_shared<Tensor>(n, d);
  auto inv_std = std::make_shared<Tensor>(n, 1);
  for (int64_t r = 0; r < n; ++r) {
    Eigen::ArrayXd row = x->data.mat().row(r).array();
    const double mu = row.mean();
    const double var = (row - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std->data[r] = is;
    x_hat->mat().row(r) = ((row - mu) * is).matrix();
    t.mat().row(r) = (x_hat->mat().row(r).array() * gain->data.mat().row(0).array() +
                      bias->data.mat().row(0).array())
                         .matrix();
  }
  auto out = make_node(std::move(t), {x, gain, bias});
  if (out->requires_grad) {
    Value *xp = x.get(), *gp = gain.get(), *bp = bias.get(), *op = out.get();
    out->backward_fn = [xp, gp, bp, op, x_hat, inv_std] {
      const int64_t n = xp->rows(), d = xp->cols();
      if (gp->requires_grad) {
        gp->ensure_grad();
        gp->grad.mat().row(0) +=
            (op->grad.mat().array() * x_hat->mat().array()).colwise().sum().matrix();
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        bp->grad.mat().row(0) += op->grad.mat().colwise().sum();
      }
      if (xp->requires_grad) {
        xp->ensure_grad();
        for (int64_t r = 0; r < n; ++r) {
          Eigen::ArrayXd gdy = op->grad.mat().row(r).array() * gp->data.mat().row(0).array();
          Eigen::ArrayXd xh = x_hat->mat().row(r).array();
          const double m1 = gdy.mean();
          const double m2 = (gdy * xh).mean();
          xp->grad.mat().row(r) += ((gdy - m1 - xh * m2) * inv_std->data[r]).matrix();
        }
        (void)d;
      }
    };
  }
  return out;
}

ValuePtr mha_core(const ValuePtr& q, const ValuePtr& k, const ValuePtr& v, int64_t batch,
                  int64_t seq_len, int64_t heads, const std::vector<uint8_t>& key_keep) {
  const int64_t d = q->cols();
  if (q->rows() != batch * seq_len || !q->data.same_shape(k->data) || !q->data.same_shape(v->data))
    fail("ShapeMismatch", "mha_core q" + q->data.shape_str() + " k" + k->data.shape_str() + " v" +
                              v->data.shape_str());
  if (d % heads != 0) fail("ShapeMismatch", "dim " + std::to_string(d) + " not divisible by heads");
  if (static_cast<int64_t>(key_keep.size()) != batch * seq_len)
    fail("ShapeMismatch", "key_keep size");
  const int64_t dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor t(batch * seq_len, d);
  // Softmax probabilities per (sample, head), cached for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve(batch * heads);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      auto Q = q->data.mat().block(b * seq_len, h * dh, seq_len, dh);
      auto K = k->data.mat().block(b * seq_len, h * dh, seq_len, dh);
      auto V = v->data.mat().block(b * seq_len, h * dh, seq_len, dh);
      RowMat scores = (Q * K.transpose()) * att_scale;
      for (int64_t j = 0; j < seq_len; ++j)
        if (!key_keep[b * seq_len + j]) scores.col(j).array() = -1e30;
      RowMat P(seq_len, seq_len);
      for (int64_t i = 0; i < seq_len; ++i) {
        Eigen::ArrayXd row = scores.row(i).array();
        const double m = row.maxCoeff();
        Eigen::ArrayXd e = (row - m).exp();
        P.row(i) = (e / e.sum()).matrix();
      }
      t.mat().block(b * seq_len, h * dh, seq_len, dh).noalias() = P * V;
      probs->push_back(std::move(P));
    }
  }

  auto out = make_node(std::move(t), {q, k, v});
  if (out->requires_grad) {
    Value *qp = q.get(), *kp = k.get(), *vp = v.get(), *op = out.get();
    out->backward_fn = [qp, kp, vp, op, probs, batch, seq_len, heads, dh, att_scale] {
      qp->ensure_grad();
      kp->ensure_grad();
      vp->ensure_grad();
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
          const RowMat& P = (*probs)[b * heads + h];
          auto Q = qp->data.mat().block(b * seq_len, h * dh, seq_len, dh);
          auto K = kp->data.mat().block(b * seq_len, h * dh, seq_len, dh);
          auto V = vp->data.mat().block(b * seq_len, h * dh, seq_len, dh);
          auto dO = op->grad.mat().block(b * seq_len, h * dh, seq_len, dh);
          if (vp->requires_grad)
            vp->grad.mat().block(b * seq_len, h * dh, seq_len, dh).noalias() += P.transpose() * dO;
          RowMat dP = dO * V.transpose();
          // dS = P .* (dP - rowwise_sum(dP .* P))
          RowMat dS(seq_len, seq_len);
          for (int64_t i = 0; i < seq_len; ++i) {
            const double dot = (dP.row(i).array() * P.row(i).array()).sum();
            dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
          }
          if (qp->requires_grad)
            qp->grad.mat().block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                dS * K * att_scale;
          if (kp->requires_grad)
            kp->grad.mat().block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                dS.transpose() * Q * att_scale;
        }
      }
    };
  }
  return out;
}

ValuePtr embedding_lookup(const ValuePtr& table, std::vector<int64_t> ids) {
  Tensor t(static_cast<int64_t>(ids.size()), table->cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->rows())
      fail("ShapeMismatch", "embedding id " + std::to_string(ids[i]) + " out of vocab " +
                                std::to_string(table->rows()));
    t.mat().row(i) = table->data.mat().row(ids[i]);
  }
  auto out = make_node(std::move(t), {table});
  if (out->requires_grad) {
    Value *tp = table.get(), *op = out.get();
    auto idp = std::make_shared<std::vector<int64_t>>(std::move(ids));
    out->backward_fn = [tp, op, idp] {
      tp->ensure_grad();
      for (size_t i = 0; i < idp->size(); ++i)
        tp->grad.mat().row((*idp)[i]) += op->grad.mat().row(i);
    };
  }
  return out;
}

ValuePtr cross_entropy_rows(const ValuePtr& logits, std::vector<int64_t> targets, double cap) {
  const int64_t n = logits->rows(), kk = logits->cols();
  if (static_cast<int64_t>(targets.size()) != n)
    fail("ShapeMismatch", "cross_entropy targets " + std::to_string(targets.size()) + " rows " +
                              std::to_string(n));
  Tensor t(n, 1);
  auto soft = std::make_shared<Tensor>(n, kk);
  auto capped = std::make_shared<std::vector<uint8_t>>(n, 0);
  for (int64_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || targets[r] >= kk) fail("ShapeMismatch", "cross_entropy target id out of range");
    Eigen::ArrayXd row = logits->data.mat().row(r).array();
    const double m = row.maxCoeff();
    Eigen::ArrayXd e = (row - m).exp();
    const double z = e.sum();
    soft->mat().row(r) = (e / z).matrix();
    double nll = std::log(z) + m - row[targets[r]];
    if (nll > cap) {
      nll = cap;
      (*capped)[r] = 1;
    }
    t.data[r] = nll;
  }
  auto out = make_node(std::move(t), {logits});
  if (out->requires_grad) {
    Value *lp = logits.get(), *op = out.get();
    auto tgt = std::make_shared<std::vector<int64_t>>(std::move(targets));
    out->backward_fn = [lp, op, soft, capped, tgt] {
      lp->ensure_grad();
      for (int64_t r = 0; r < lp->rows(); ++r) {
        if ((*capped)[r]) continue;
        const double g = op->grad.data[r];
        if (g == 0.0) continue;
        lp->grad.mat().row(r) += g * soft->mat().row(r);
        lp->grad.at(r, (*tgt)[r]) -= g;
      }
    };
  }
  return out;
}

ValuePtr cosine_rows(const ValuePtr& x, const ValuePtr& e) {
  const int64_t n = x->rows(), d = x->cols();
  if (e->rows() != 1 || e->cols() != d)
    fail("ShapeMismatch", "cosine_rows e " + e->data.shape_str() + " for x " + x->data.shape_str());
  constexpr double kNormFloor = 1e-12;
  Tensor t(n, 1);
  const double e_norm = std::max(kNormFloor, e->data.mat().row(0).norm());
  auto x_norms = std::make_shared<Eigen::ArrayXd>(n);
  for (int64_t r = 0; r < n; ++r) {
    (*x_norms)[r] = std::max(kNormFloor, x->data.mat().row(r).norm());
    t.data[r] = x->data.mat().row(r).dot(e->data.mat().row(0)) / ((*x_norms)[r] * e_norm);
  }
  auto out = make_node(std::move(t), {x, e});
  if (out->requires_grad) {
    Value *xp = x.get(), *ep = e.get(), *op = out.get();
    out->backward_fn = [xp, ep, op, x_norms, e_norm] {
      auto ev = ep->data.mat().row(0);
      if (xp->requires_grad) {
        xp->ensure_grad();
        for (int64_t r = 0; r < xp->rows(); ++r) {
          const double g = op->grad.data[r];
          if (g == 0.0) continue;
          const double xn = (*x_norms)[r];
          const double c = op->data.data[r];
          xp->grad.mat().row(r) +=
              g * (ev / (xn * e_norm) - c * xp->data.mat().row(r) / (xn * xn));
        }
      }
      if (ep->requires_grad) {
        ep->ensure_grad();
        for (int64_t r = 0; r < xp->rows(); ++r) {
          const double g = op->grad.data[r];
          if (g == 0.0) continue;
          const double xn = (*x_norms)[r];
          const double c = op->data.data[r];
          ep->grad.mat().row(0) += g * (xp->data.mat().row(r) / (xn * e_norm) - c * ev / (e_norm * e_norm));
        }
      }
    };
  }
  return out;
}

ValuePtr cosine_rows_grouped(const ValuePtr& x, const ValuePtr& e, int64_t group_size) {
  const int64_t n = x->rows(), d = x->cols();
  if (e->cols() != d || n != e->rows() * group_size)
    fail("ShapeMismatch", "cosine_rows_grouped x" + x->data.shape_str() + " e" +
                              e->data.shape_str() + " group " + std::to_string(group_size));
  constexpr double kNormFloor = 1e-12;
  Tensor t(n, 1);
  auto x_norms = std::make_shared<Eigen::ArrayXd>(n);
  auto e_norms = std::make_shared<Eigen::ArrayXd>(e->rows());
  for (int64_t b = 0; b < e->rows(); ++b)
    (*e_norms)[b] = std::max(kNormFloor, e->data.mat().row(b).norm());
  for (int64_t r = 0; r < n; ++r) {
    const int64_t b = r / group_size;
    (*x_norms)[r] = std::max(kNormFloor, x->data.mat().row(r).norm());
    t.data[r] = x->data.mat().row(r).dot(e->data.mat().row(b)) / ((*x_norms)[r] * (*e_norms)[b]);
  }
  auto out = make_node(std::move(t), {x, e});
  if (out->requires_grad) {
    Value *xp = x.get(), *ep = e.get(), *op = out.get();
    out->backward_fn = [xp, ep, op, x_norms, e_norms, group_size] {
      if (xp->requires_grad) xp->ensure_grad();
      if (ep->requires_grad) ep->ensure_grad();
      for (int64_t r = 0; r < xp->rows(); ++r) {
        const double g = op->grad.data[r];
        if (g == 0.0) continue;
        const int64_t b = r / group_size;
        const double xn = (*x_norms)[r];
        const double en = (*e_norms)[b];
        const double c = op->data.data[r];
        auto xv = xp->data.mat().row(r);
        auto ev = ep->data.mat().row(b);
        if (xp->requires_grad)
          xp->grad.mat().row(r) += g * (ev / (xn * en) - c * xv / (xn * xn));
        if (ep->requires_grad)
          ep->grad.mat().row(b) += g * (xv / (xn * en) - c * ev / (en * en));
      }
    };
  }
  return out;
}

ValuePtr add_tiled(const ValuePtr& x, const ValuePtr& t) {
  const int64_t s = t->rows(), d = t->cols();
  if (x->cols() != d || x->rows() % s != 0)
    fail("ShapeMismatch", "add_tiled " + x->data.shape_str() + " + " + t->data.shape_str());
  const int64_t b = x->rows() / s;
  Tensor o(x->rows(), d);
  for (int64_t i = 0; i < b; ++i)
    o.mat().middleRows(i * s, s) = x->data.mat().middleRows(i * s, s) + t->data.mat();
  auto out = make_node(std::move(o), {x, t});
  if (out->requires_grad) {
    Value *xp = x.get(), *tp = t.get(), *op = out.get();
    out->backward_fn = [xp, tp, op, b, s] {
      if (xp->requires_grad) {
        xp->ensure_grad();
        xp->grad.data += op->grad.data;
      }
      if (tp->requires_grad) {
        tp->ensure_grad();
        for (int64_t i = 0; i < b; ++i) tp->grad.mat() += op->grad.mat().middleRows(i * s, s);
      }
    };
  }
  return out;
}

ValuePtr repeat_rows_grouped(const ValuePtr& e, int64_t group_size) {
  const int64_t b = e->rows(), d = e->cols();
  Tensor o(b * group_size, d);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < group_size; ++j) o.mat().row(i * group_size + j) = e->data.mat().row(i);
  auto out = make_node(std::move(o), {e});
  if (out->requires_grad) {
    Value *ep = e.get(), *op = out.get();
    out->backward_fn = [ep, op, b, group_size] {
      ep->ensure_grad();
      for (int64_t i = 0; i < b; ++i)
        ep->grad.mat().row(i) += op->grad.mat().middleRows(i * group_size, group_size).colwise().sum();
    };
  }
  return out;
}

ValuePtr sum_rows_grouped(const ValuePtr& x, int64_t group_size) {
  if (x->rows() % group_size != 0)
    fail("ShapeMismatch", "sum_rows_grouped " + x->data.shape_str() + " by " + std::to_string(group_size));
  const int64_t b = x->rows() / group_size, d = x->cols();
  Tensor o(b, d);
  for (int64_t i = 0; i < b; ++i)
    o.mat().row(i) = x->data.mat().middleRows(i * group_size, group_size).colwise().sum();
  auto out = make_node(std::move(o), {x});
  if (out->requires_grad) {
    Value *xp = x.get(), *op = out.get();
    out->backward_fn = [xp, op, b, group_size] {
      xp->ensure_grad();
      for (int64_t i = 0; i < b; ++i)
        xp->grad.mat().middleRows(i * group_size, group_size).rowwise() += op->grad.mat().row(i);
    };
  }
  return out;
}

TConvPlan make_tconv_plan(int64_t in_h, int64_t in_w, int64_t kernel, int64_t stride, int64_t pad) {
  TConvPlan plan;
  plan.in_h = in_h;
  plan.in_w = in_w;
  plan.kernel = kernel;
  plan.stride = stride;
  plan.pad = pad;
  plan.out_h = (in_h - 1) * stride - 2 * pad + kernel;
  plan.out_w = (in_w - 1) * stride - 2 * pad + kernel;
  plan.target.assign(in_h * in_w * kernel * kernel, -1);
  for (int64_t iy = 0; iy < in_h; ++iy) {
    for (int64_t ix = 0; ix < in_w; ++ix) {
      const int64_t cell = iy * in_w + ix;
      for (int64_t ky = 0; ky < kernel; ++ky) {
        for (int64_t kx = 0; kx < kernel; ++kx) {
          const int64_t oy = iy * stride + ky - pad;
          const int64_t ox = ix * stride + kx - pad;
          if (oy < 0 || oy >= plan.out_h || ox < 0 || ox >= plan.out_w) continue;
          plan.target[cell * kernel * kernel + ky * kernel + kx] =
              static_cast<int32_t>(oy * plan.out_w + ox);
        }
      }
    }
  }
  return plan;
}

ValuePtr tconv_scatter(const ValuePtr& y, const TConvPlan& plan, int64_t channels) {
  const int64_t taps = plan.kernel * plan.kernel;
  if (y->rows() != plan.in_h * plan.in_w || y->cols() != taps * channels)
    fail("ShapeMismatch", "tconv_scatter input " + y->data.shape_str());
  Tensor o(plan.out_h * plan.out_w, channels);
  for (int64_t cell = 0; cell < y->rows(); ++cell) {
    for (int64_t tap = 0; tap < taps; ++tap) {
      const int32_t tgt = plan.target[cell * taps + tap];
      if (tgt < 0) continue;
      o.mat().row(tgt) += y->data.mat().row(cell).segment(tap * channels, channels);
    }
  }
  auto out = make_node(std::move(o), {y});
  if (out->requires_grad) {
    Value *yp = y.get(), *op = out.get();
    auto tgts = std::make_shared<std::vector<int32_t>>(plan.target);
    out->backward_fn = [yp, op, tgts, taps, channels] {
      yp->ensure_grad();
      for (int64_t cell = 0; cell < yp->rows(); ++cell) {
        for (int64_t tap = 0; tap < taps; ++tap) {
          const int32_t tgt = (*tgts)[cell * taps + tap];
          if (tgt < 0) continue;
          yp->grad.mat().row(cell).segment(tap * channels, channels) += op->grad.mat().row(tgt);
        }
      }
    };
  }
  return out;
}

namespace {

struct BilinearTap {
  int64_t src;
  double weight;
};

// align_corners = false: source coordinate (dst + 0.5)/2 - 0.5, edge-clamped.
std::shared_ptr<std::vector<std::array<BilinearTap, 4>>> bilinear_taps(int64_t h, int64_t w) {
  const int64_t oh = 2 * h, ow = 2 * w;
  auto taps = std::make_shared<std::vector<std::array<BilinearTap, 4>>>(oh * ow);
  auto clampi = [](int64_t v, int64_t hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  for (int64_t oy = 0; oy < oh; ++oy) {
    const double sy = (oy + 0.5) / 2.0 - 0.5;
    const int64_t y0 = static_cast<int64_t>(std::floor(sy));
    const double fy = sy - y0;
    for (int64_t ox = 0; ox < ow; ++ox) {
      const double sx = (ox + 0.5) / 2.0 - 0.5;
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const double fx = sx - x0;
      const int64_t y0c = clampi(y0, h), y1c = clampi(y0 + 1, h);
      const int64_t x0c = clampi(x0, w), x1c = clampi(x0 + 1, w);
      (*taps)[oy * ow + ox] = {BilinearTap{y0c * w + x0c, (1 - fy) * (1 - fx)},
                               BilinearTap{y0c * w + x1c, (1 - fy) * fx},
                               BilinearTap{y1c * w + x0c, fy * (1 - fx)},
                               BilinearTap{y1c * w + x1c, fy * fx}};
    }
  }
  return taps;
}

}  // namespace

ValuePtr bilinear_up2(const ValuePtr& x, int64_t h, int64_t w) {
  const int64_t c = x->cols();
  if (x->rows() != h * w) fail("ShapeMismatch", "bilinear_up2 input " + x->data.shape_str());
  auto taps = bilinear_taps(h, w);
  const int64_t out_cells = 4 * h * w;

  Tensor o(out_cells, c);
  for (int64_t i = 0; i < out_cells; ++i)
    for (const auto& tp : (*taps)[i]) o.mat().row(i) += tp.weight * x->data.mat().row(tp.src);

  auto out = make_node(std::move(o), {x});
  if (out->requires_grad) {
    Value *xp = x.get(), *op = out.get();
    out->backward_fn = [xp, op, taps] {
      xp->ensure_grad();
      for (int64_t i = 0; i < op->rows(); ++i)
        for (const auto& tp : (*taps)[i]) xp->grad.mat().row(tp.src) += tp.weight * op->grad.mat().row(i);
    };
  }
  return out;
}

ValuePtr bilinear_up2_rows(const ValuePtr& x, int64_t h, int64_t w) {
  if (x->cols() != h * w) fail("ShapeMismatch", "bilinear_up2_rows input " + x->data.shape_str());
  auto taps = bilinear_taps(h, w);
  const int64_t n = x->rows(), out_cells = 4 * h * w;

  Tensor o(n, out_cells);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t i = 0; i < out_cells; ++i) {
      double acc = 0.0;
      for (const auto& tp : (*taps)[i]) acc += tp.weight * x->data.at(r, tp.src);
      o.at(r, i) = acc;
    }

  auto out = make_node(std::move(o), {x});
  if (out->requires_grad) {
    Value *xp = x.get(), *op = out.get();
    out->backward_fn = [xp, op, taps] {
      xp->ensure_grad();
      const int64_t out_cells = op->cols();
      for (int64_t r = 0; r < xp->rows(); ++r)
        for (int64_t i = 0; i < out_cells; ++i) {
          const double g = op->grad.at(r, i);
          if (g == 0.0) continue;
          for (const auto& tp : (*taps)[i]) xp->grad.at(r, tp.src) += tp.weight * g;
        }
    };
  }
  return out;
}

}  // namespace oneref
