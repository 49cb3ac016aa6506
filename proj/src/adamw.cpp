#include "oneref/adamw.hpp"

#include <cmath>

namespace oneref {

void AdamW::step() {
  auto t_state = store_.state("_adam/t", 1, 1);
  t_state->data.data[0] += 1.0;
  const double t = t_state->data.data[0];
  const double bc1 = 1.0 - std::pow(beta1_, t);
  const double bc2 = 1.0 - std::pow(beta2_, t);

  for (auto& [name, p] : store_.trainable()) {
    p->ensure_grad();
    auto m = store_.state("_adam/m/" + name, p->data.rows, p->data.cols);
    auto v = store_.state("_adam/v/" + name, p->data.rows, p->data.cols);
    m->data.data = beta1_ * m->data.data + (1.0 - beta1_) * p->grad.data;
    v->data.data = beta2_ * v->data.data + (1.0 - beta2_) * p->grad.data.square();
    // Decoupled decay, then the Adam direction with bias correction.
    p->data.data -= lr_ * weight_decay_ * p->data.data;
    p->data.data -= lr_ * (m->data.data / bc1) / ((v->data.data / bc2).sqrt() + eps_);
  }
}

}  // namespace oneref
