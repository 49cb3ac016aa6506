#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "oneref/error.hpp"
#include "oneref/losses.hpp"
#include "oneref/rng.hpp"

using namespace oneref;

namespace {

Tensor random_tensor(Rng& rng, int64_t r, int64_t c, double lo, double hi) {
  Tensor t(r, c);
  for (int64_t i = 0; i < t.size(); ++i) t.data[i] = rng.uniform(lo, hi);
  return t;
}

Tensor random_distribution(Rng& rng, int64_t n) {
  Tensor t(n, 1);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    t.data[i] = rng.uniform(0.01, 1.0);
    sum += t.data[i];
  }
  t.data /= sum;
  return t;
}

double fd_worst(const std::function<ValuePtr()>& build, const std::vector<ValuePtr>& inputs,
                double eps = 1e-5) {
  for (const auto& in : inputs) in->zero_grad();
  backward(build());
  double worst = 0.0;
  for (const auto& in : inputs) {
    for (int64_t i = 0; i < in->data.size(); ++i) {
      const double old = in->data.data[i];
      in->data.data[i] = old + eps;
      const double up = build()->scalar();
      in->data.data[i] = old - eps;
      const double down = build()->scalar();
      in->data.data[i] = old;
      const double fd = (up - down) / (2.0 * eps);
      const double ad = in->grad.data[i];
      worst = std::max(worst, std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("mim/mlm loss closed forms") {
  // Uniform logits over K classes -> ln K.
  Tensor logits = Tensor::zeros(5, 8);
  std::vector<int64_t> targets = {0, 1, 2, 3, 7};
  CHECK(mim_loss(logits, targets) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK(mlm_loss(logits, targets) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  // Near-one-hot correct logits -> near zero.
  Tensor hot(2, 4);
  hot.at(0, 1) = 50.0;
  hot.at(1, 2) = 50.0;
  CHECK(mim_loss(hot, {1, 2}) < 1e-12);

  // Degenerate -inf-like target logit is capped at 30 per element.
  Tensor bad(1, 2);
  bad.at(0, 0) = -500.0;
  bad.at(0, 1) = 500.0;
  CHECK(mim_loss(bad, {0}) == 30.0);

  CHECK_THROWS_AS(mim_loss(Tensor::zeros(0, 4), {}), Error);
  try {
    mim_loss(Tensor::zeros(0, 4), {});
  } catch (const Error& e) {
    CHECK(e.code() == "EmptyMaskSet");
  }
}

TEST_CASE("smooth_l1 branches") {
  Tensor a = Tensor::zeros(1, 1), b = Tensor::zeros(1, 1);
  CHECK(smooth_l1(a, b) == 0.0);
  b.data[0] = 0.5;
  CHECK(smooth_l1(a, b) == doctest::Approx(0.125).epsilon(1e-15));  // quadratic branch
  b.data[0] = 2.0;
  CHECK(smooth_l1(a, b) == doctest::Approx(1.5).epsilon(1e-15));  // linear branch
}

TEST_CASE("focal loss closed forms and BCE identity") {
  // Single positive cell at p = 0.5 with defaults.
  Tensor p(1, 1);
  p.data[0] = 0.5;
  CHECK(focal_loss(p, {1}, 2.0, 0.25) ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

  // gamma = 0, alpha = 1 reduces to mean binary cross-entropy within 1e-12.
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = 1 + int64_t(rng.below(10));
    Tensor probs = random_tensor(rng, n, 1, 0.01, 0.99);
    std::vector<uint8_t> targets(n);
    for (auto& t : targets) t = rng.uniform() < 0.5;
    double bce = 0.0;
    for (int64_t i = 0; i < n; ++i)
      bce += targets[i] ? -std::log(probs.data[i]) : -std::log(1.0 - probs.data[i]);
    bce /= double(n);
    CHECK(std::abs(focal_loss(probs, targets, 0.0, 1.0) - bce) < 1e-12);
  }

  // Saturated-correct predictions drive the loss to ~0.
  Tensor sure(2, 1);
  sure.data[0] = 1.0 - 1e-9;
  sure.data[1] = 1e-9;
  CHECK(focal_loss(sure, {1, 0}) < 1e-10);
}

TEST_CASE("dice loss closed forms") {
  // Exact binary match -> 0 with any smoothing.
  Tensor exact(2, 2);
  exact.data << 1.0, 0.0, 0.0, 1.0;
  CHECK(dice_loss(exact, {1, 0, 0, 1}, 1.0) == 0.0);
  CHECK(dice_loss(exact, {1, 0, 0, 1}, 5.0) == 0.0);

  // All-zero prediction vs all-one target on n cells: 1 - 1/(n+1).
  const int64_t n = 6;
  Tensor zeros = Tensor::zeros(1, n);
  std::vector<uint8_t> ones(n, 1);
  CHECK(dice_loss(zeros, ones, 1.0) == doctest::Approx(1.0 - 1.0 / (n + 1)).epsilon(1e-12));

  // Empty target, zero prediction -> 0 (smoothing guards 0/0).
  CHECK(dice_loss(zeros, std::vector<uint8_t>(n, 0), 1.0) == 0.0);
}

TEST_CASE("KL divergence properties") {
  Tensor t(2, 1), p(2, 1);
  t.data << 1.0, 0.0;
  p.data << 0.5, 0.5;
  CHECK(kl_divergence(t, p) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(kl_divergence(p, p) == 0.0);

  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t n = 2 + int64_t(rng.below(8));
    const Tensor a = random_distribution(rng, n);
    const Tensor b = random_distribution(rng, n);
    CHECK(kl_divergence(a, b) >= 0.0);
    CHECK(kl_divergence(a, a) == 0.0);
  }

  Tensor invalid(2, 1);
  invalid.data << 0.9, 0.2;
  CHECK_THROWS_AS(kl_divergence(t, invalid), Error);
}

TEST_CASE("referring losses reduce to the vanilla ones when referring terms vanish") {
  Rng rng(12);
  Tensor logits = random_tensor(rng, 6, 9, -2.0, 2.0);
  std::vector<int64_t> targets;
  for (int i = 0; i < 6; ++i) targets.push_back(int64_t(rng.below(9)));
  Tensor pred_scores = random_tensor(rng, 10, 4, -1.0, 1.0);
  Tensor tgt_scores = random_tensor(rng, 10, 4, -1.0, 1.0);

  const double vanilla = mim_loss(logits, targets);
  CHECK(referring_mim_loss(logits, targets, pred_scores, tgt_scores, 1.0, 0.0) ==
        doctest::Approx(vanilla).epsilon(1e-15));

  // Perfect scores + perfect tokens -> only the (tiny) token term remains.
  Tensor hot(1, 4);
  hot.at(0, 2) = 60.0;
  CHECK(referring_mim_loss(hot, {2}, tgt_scores, tgt_scores) < 1e-12);

  // Constant 0.5 offset in every channel -> 0.125 regression term.
  Tensor off = tgt_scores;
  off.data += 0.5;
  CHECK(referring_mim_loss(hot, {2}, off, tgt_scores) == doctest::Approx(0.125).epsilon(1e-12));

  const Tensor dist = random_distribution(rng, 5);
  const double vanilla_mlm = mlm_loss(logits, targets);
  CHECK(referring_mlm_loss(logits, targets, dist, dist, 1.0, 0.0) ==
        doctest::Approx(vanilla_mlm).epsilon(1e-15));
  CHECK(referring_mlm_loss(logits, targets, dist, dist, 1.0, 1.0) ==
        doctest::Approx(vanilla_mlm).epsilon(1e-15));  // KL(d||d) = 0
}

TEST_CASE("rec_loss composition, lambda-linearity and independent recomputation") {
  const Box pred{0.5, 0.5, 0.5, 0.5};
  const Box gt{0.5, 0.5, 0.25, 0.25};
  const MaskPlan raster = box_to_raster_mask(gt, 4, 4);
  Tensor sim = Tensor::full(1, 16, 0.5);
  LossWeights w;  // 2, 2, 20, 2

  // Independent scalar recomputation of every term.
  double l1 = 0.0;
  const double dx[4] = {0.0, 0.0, 0.25, 0.25};
  for (double d : dx) l1 += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  l1 /= 4.0;
  const double giou_term = 1.0 - giou(pred, gt);
  double focal = 0.0;
  for (uint32_t i = 0; i < raster.size(); ++i) {
    const double pt = raster.at_flat(i) ? 0.5 : 0.5;
    focal += -0.25 * std::pow(1.0 - pt, 2.0) * std::log(pt);
  }
  focal /= raster.size();
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (uint32_t i = 0; i < raster.size(); ++i) {
    inter += 0.5 * (raster.at_flat(i) ? 1.0 : 0.0);
    psum += 0.5;
    tsum += raster.at_flat(i) ? 1.0 : 0.0;
  }
  const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
  const double expected = 2.0 * l1 + 2.0 * giou_term + 20.0 * focal + 2.0 * dice;
  CHECK(rec_loss(pred, gt, sim, raster, w) == doctest::Approx(expected).epsilon(1e-12));

  // Perfect prediction with saturated similarity map -> ~0.
  Tensor sat(1, 16);
  for (uint32_t i = 0; i < raster.size(); ++i)
    sat.data[i] = raster.at_flat(i) ? 1.0 - 1e-9 : 1e-9;
  CHECK(rec_loss(gt, gt, sat, raster, w) < 1e-7);

  // Zero box-mask weights reduce to the two-term vanilla grounding loss.
  LossWeights vanilla = w;
  vanilla.lambda_f_box = 0.0;
  vanilla.lambda_d_box = 0.0;
  CHECK(rec_loss(pred, gt, sim, raster, vanilla) ==
        doctest::Approx(2.0 * l1 + 2.0 * giou_term).epsilon(1e-12));

  // The loss is exactly linear in the lambda weights.
  LossWeights doubled = w;
  doubled.lambda_l1 *= 2;
  doubled.lambda_giou *= 2;
  doubled.lambda_f_box *= 2;
  doubled.lambda_d_box *= 2;
  CHECK(rec_loss(pred, gt, sim, raster, doubled) ==
        doctest::Approx(2.0 * rec_loss(pred, gt, sim, raster, w)).epsilon(1e-12));
}

TEST_CASE("res_loss closed form") {
  LossWeights w;  // f_seg 20, d_seg 2
  Tensor half = Tensor::full(1, 4, 0.5);
  std::vector<uint8_t> all_true(4, 1);
  const double focal = 0.25 * 0.25 * std::log(2.0);
  const double dice = 1.0 - (2.0 * 2.0 + 1.0) / (2.0 + 4.0 + 1.0);
  CHECK(res_loss(half, all_true, w) == doctest::Approx(20.0 * focal + 2.0 * dice).epsilon(1e-12));

  Tensor sat(1, 4);
  for (int i = 0; i < 4; ++i) sat.data[i] = 1.0 - 1e-9;
  CHECK(res_loss(sat, all_true, w) < 1e-7);

  LossWeights zero;
  zero.lambda_f_seg = 0.0;
  zero.lambda_d_seg = 0.0;
  CHECK(res_loss(half, all_true, zero) == 0.0);
}

TEST_CASE("graph losses match the scalar recomputations") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t n = 2 + int64_t(rng.below(6));
    Tensor probs = random_tensor(rng, 1, n, 0.05, 0.95);
    std::vector<uint8_t> target(n);
    Tensor target01(1, n);
    for (int64_t i = 0; i < n; ++i) {
      target[i] = rng.uniform() < 0.5;
      target01.data[i] = target[i];
    }
    auto p = leaf(probs, true);
    CHECK(focal_graph(p, target01)->scalar() ==
          doctest::Approx(focal_loss(probs, target)).epsilon(1e-12));
    CHECK(dice_graph(p, target01)->scalar() ==
          doctest::Approx(dice_loss(probs, target)).epsilon(1e-12));

    Tensor a = random_tensor(rng, 3, 4, -2.0, 2.0);
    Tensor b = random_tensor(rng, 3, 4, -2.0, 2.0);
    auto av = leaf(a, true);
    CHECK(smooth_l1_graph(av, b)->scalar() == doctest::Approx(smooth_l1(a, b)).epsilon(1e-12));

    const Tensor dist_t = random_distribution(rng, n);
    const Tensor dist_p = random_distribution(rng, n);
    Tensor rows_t(1, n), rows_p(1, n);
    for (int64_t i = 0; i < n; ++i) {
      rows_t.data[i] = dist_t.data[i];
      rows_p.data[i] = dist_p.data[i];
    }
    auto pv = leaf(rows_p, true);
    CHECK(kl_rows_graph(pv, rows_t)->scalar() ==
          doctest::Approx(kl_divergence(dist_t, dist_p)).epsilon(1e-10));
  }
}

TEST_CASE("graph giou matches the geometry kernel") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    Box a, b;
    auto rb = [&rng](Box& x) {
      x.w_r = rng.uniform(0.05, 0.8);
      x.h_r = rng.uniform(0.05, 0.8);
      x.x_c = rng.uniform(x.w_r / 2, 1 - x.w_r / 2);
      x.y_c = rng.uniform(x.h_r / 2, 1 - x.h_r / 2);
    };
    rb(a);
    rb(b);
    Tensor pa(1, 4), pb(1, 4);
    pa.data << a.x_c, a.y_c, a.w_r, a.h_r;
    pb.data << b.x_c, b.y_c, b.w_r, b.h_r;
    auto pav = leaf(pa, true);
    CHECK(giou_rows_graph(pav, pb)->data.data[0] == doctest::Approx(giou(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("every composite loss passes finite-difference gradient checks") {
  Rng rng(88);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t n = 3 + int64_t(rng.below(4));
    // focal + dice on probabilities.
    auto probs = leaf(random_tensor(rng, 2, n, 0.1, 0.9), true);
    Tensor t01(2, n);
    for (int64_t i = 0; i < t01.size(); ++i) t01.data[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    CHECK(fd_worst([&] { return focal_graph(probs, t01); }, {probs}) < 1e-4);
    CHECK(fd_worst([&] { return dice_graph(probs, t01); }, {probs}) < 1e-4);

    // smooth l1.
    auto pred = leaf(random_tensor(rng, 2, 4, -1.0, 1.0), true);
    Tensor tgt = random_tensor(rng, 2, 4, -1.0, 1.0);
    CHECK(fd_worst([&] { return smooth_l1_graph(pred, tgt); }, {pred}) < 1e-4);

    // KL with a softmax-produced prediction.
    auto logits = leaf(random_tensor(rng, 2, n, -1.0, 1.0), true);
    Tensor dist_rows(2, n);
    for (int64_t r = 0; r < 2; ++r) {
      const Tensor d = random_distribution(rng, n);
      for (int64_t i = 0; i < n; ++i) dist_rows.at(r, i) = d.data[i];
    }
    CHECK(fd_worst([&] { return mean_all(kl_rows_graph(softmax_rows(logits), dist_rows)); },
                   {logits}) < 1e-4);

    // Full REC objective wrt the box and the similarity map.
    auto boxes = leaf(random_tensor(rng, 2, 4, 0.3, 0.6), true);
    Tensor gts(2, 4);
    gts.data << 0.5, 0.5, 0.4, 0.3, 0.45, 0.55, 0.2, 0.35;
    auto sim = leaf(random_tensor(rng, 2, 16, 0.1, 0.9), true);
    Tensor raster(2, 16);
    for (int64_t i = 0; i < raster.size(); ++i) raster.data[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    LossWeights w;
    CHECK(fd_worst([&] { return rec_loss_graph(boxes, gts, sim, raster, w); }, {boxes, sim}) <
          1e-4);
    CHECK(fd_worst([&] { return res_loss_graph(sim, raster, w); }, {sim}) < 1e-4);
  }
}
