#pragma once

#include "oneref/param_store.hpp"

namespace oneref {

// Adam with decoupled weight decay. Moment tensors live in the store under
// "_adam/m/<name>" and "_adam/v/<name>" so checkpoints carry optimizer state;
// the step counter sits at "_adam/t".
class AdamW {
 public:
  AdamW(ParamStore& store, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : store_(store), lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  // One update from the currently accumulated grads. Caller zeroes grads.
  void step();

 private:
  ParamStore& store_;
  double lr_;
  double weight_decay_;
  double beta1_;
  double beta2_;
  double eps_;
};

}  // namespace oneref
