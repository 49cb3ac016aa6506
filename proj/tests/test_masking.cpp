#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oneref/error.hpp"
#include "oneref/masking.hpp"

using namespace oneref;

TEST_CASE("dynamic_ratio follows the closed form") {
  const PatchGrid grid(384, 384, 16);  // 24x24 = 576
  PatchRegion region{0, 0, 10, 10};    // N_r = 100
  CHECK(dynamic_ratio(grid, region, 0.35, 0.75) ==
        doctest::Approx((0.35 * 476 + 0.75 * 100) / 576).epsilon(1e-15));
  CHECK(dynamic_ratio(grid, region, 0.35, 0.75) == doctest::Approx(0.419444444444).epsilon(1e-9));

  PatchRegion full{0, 0, 24, 24};
  CHECK(dynamic_ratio(grid, full, 0.35, 0.75) == doctest::Approx(0.75).epsilon(1e-15));
  PatchRegion empty{0, 0, 0, 0};
  CHECK(dynamic_ratio(grid, empty, 0.35, 0.75) == doctest::Approx(0.35).epsilon(1e-15));
}

TEST_CASE("random_mask masks exactly floor(ratio*n) distinct cells") {
  Rng rng(3);
  CHECK(random_mask(100, 0.0, rng).count_masked() == 0);
  CHECK(random_mask(100, 1.0, rng).count_masked() == 100);
  Rng a(42), b(42);
  const MaskPlan p1 = random_mask(576, 0.4, a);
  const MaskPlan p2 = random_mask(576, 0.4, b);
  CHECK(p1.count_masked() == 230);
  CHECK(p1 == p2);  // bit-exact replay
  Rng c(43);
  CHECK_FALSE(random_mask(576, 0.4, c) == p1);
}

TEST_CASE("blockwise_mask respects the ratio bounds") {
  const PatchGrid grid(384, 384, 16);
  {
    Rng rng(1);
    CHECK(blockwise_mask(grid, 0.0, 0.3, rng).count_masked() == 0);
  }
  {
    Rng rng(1);
    CHECK(blockwise_mask(grid, 1.0, 0.3, rng).count_masked() == 576);
  }
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const uint32_t n = blockwise_mask(grid, 0.4, 0.3, rng).count_masked();
    CHECK(n >= 230);
    CHECK(n <= 576);
  }
}

TEST_CASE("referring_dynamic_mask ratio extremes") {
  const PatchGrid grid(384, 384, 16);
  const PatchRegion region{4, 6, 10, 8};
  MaskingConfig cfg;
  {
    cfg.beta = 0.0;
    cfg.gamma = 1.0;
    Rng rng(5);
    const MaskPlan plan = referring_dynamic_mask(grid, region, cfg, rng);
    CHECK(plan.count_masked() == region.num_patches());
    for (uint32_t y = 0; y < grid.grid_h; ++y)
      for (uint32_t x = 0; x < grid.grid_w; ++x) {
        const bool in_region = x >= uint32_t(region.x_sp) && x < region.x_sp + region.w_rp &&
                               y >= uint32_t(region.y_sp) && y < region.y_sp + region.h_rp;
        CHECK(plan.at(y, x) == in_region);
      }
  }
  {
    cfg.beta = 1.0;
    cfg.gamma = 1.0;
    Rng rng(5);
    CHECK(referring_dynamic_mask(grid, region, cfg, rng).count_masked() == 576);
  }
  {
    // A 1x1 region: single patch when gamma > 0, empty when gamma = 0.
    const PatchRegion tiny{3, 3, 1, 1};
    cfg.beta = 0.0;
    cfg.gamma = 0.75;
    Rng rng(5);
    CHECK(referring_dynamic_mask(grid, tiny, cfg, rng).count_masked() == 1);
    cfg.gamma = 0.0;
    Rng rng2(5);
    CHECK(referring_dynamic_mask(grid, tiny, cfg, rng2).count_masked() == 0);
  }
}

TEST_CASE("referring_dynamic_mask determinism and in-region lower bound") {
  const PatchGrid grid(384, 384, 16);
  MaskingConfig cfg;  // beta 0.35, gamma 0.75
  Rng probe(123);
  for (int trial = 0; trial < 500; ++trial) {
    PatchRegion region;
    region.w_rp = 1 + static_cast<uint32_t>(probe.below(grid.grid_w));
    region.h_rp = 1 + static_cast<uint32_t>(probe.below(grid.grid_h));
    region.x_sp = static_cast<int32_t>(probe.below(grid.grid_w - region.w_rp + 1));
    region.y_sp = static_cast<int32_t>(probe.below(grid.grid_h - region.h_rp + 1));

    Rng r1(trial), r2(trial);
    const MaskPlan p1 = referring_dynamic_mask(grid, region, cfg, r1);
    const MaskPlan p2 = referring_dynamic_mask(grid, region, cfg, r2);
    CHECK(p1 == p2);

    uint32_t in_region = 0;
    for (uint32_t y = 0; y < region.h_rp; ++y)
      for (uint32_t x = 0; x < region.w_rp; ++x)
        in_region += p1.at(region.y_sp + y, region.x_sp + x);
    const uint32_t floor_bound =
        static_cast<uint32_t>(std::ceil(cfg.gamma * region.num_patches())) - 1;
    CHECK(in_region >= floor_bound);
    CHECK(in_region <= region.num_patches());
  }
}

TEST_CASE("mean masked fraction tracks the dynamic ratio") {
  const PatchGrid grid(384, 384, 16);
  MaskingConfig cfg;
  const PatchRegion region{7, 7, 10, 10};
  const double alpha = dynamic_ratio(grid, region, cfg.beta, cfg.gamma);
  double total = 0.0, in_region_total = 0.0;
  const int trials = 10000;
  for (int s = 0; s < trials; ++s) {
    Rng rng(s);
    const MaskPlan plan = referring_dynamic_mask(grid, region, cfg, rng);
    total += plan.count_masked();
    uint32_t in_region = 0;
    for (uint32_t y = 0; y < region.h_rp; ++y)
      for (uint32_t x = 0; x < region.w_rp; ++x)
        in_region += plan.at(region.y_sp + y, region.x_sp + x);
    in_region_total += in_region;
  }
  const double mean_fraction = total / trials / grid.num_patches();
  CHECK(std::abs(mean_fraction - alpha) < 0.03);
  const double mean_in_region = in_region_total / trials / region.num_patches();
  CHECK(mean_in_region >= 0.75);
  CHECK(mean_in_region <= 0.80);
}

TEST_CASE("full-grid referring mask degenerates to blockwise in distribution") {
  const PatchGrid grid(384, 384, 16);
  const PatchRegion full{0, 0, 24, 24};
  MaskingConfig cfg;
  cfg.beta = 0.4;
  cfg.gamma = 0.4;
  const int trials = 2000;
  double mean_ref = 0.0, mean_block = 0.0, var_ref = 0.0, var_block = 0.0;
  std::vector<double> ref(trials), block(trials);
  for (int s = 0; s < trials; ++s) {
    Rng r1(s), r2(s + 777);
    ref[s] = referring_dynamic_mask(grid, full, cfg, r1).count_masked();
    block[s] = blockwise_mask(grid, 0.4, cfg.aspect_a, r2).count_masked();
    mean_ref += ref[s];
    mean_block += block[s];
  }
  mean_ref /= trials;
  mean_block /= trials;
  for (int s = 0; s < trials; ++s) {
    var_ref += (ref[s] - mean_ref) * (ref[s] - mean_ref);
    var_block += (block[s] - mean_block) * (block[s] - mean_block);
  }
  var_ref /= trials;
  var_block /= trials;
  CHECK(std::abs(mean_ref - mean_block) < 3.0);  // counts out of 576
  CHECK(std::abs(std::sqrt(var_ref) - std::sqrt(var_block)) < 3.0);
}

TEST_CASE("referring_text_mask span priority and counts") {
  const std::vector<uint8_t> maskable = {0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};  // 10 maskable
  {
    Rng rng(1);
    CHECK(referring_text_mask(maskable, std::nullopt, 0.0, rng).count_masked() == 0);
  }
  {
    // ceil(0.4*10) = 4 total; span tokens 2,3 first.
    Rng rng(1);
    const MaskPlan plan = referring_text_mask(maskable, std::make_pair(2u, 4u), 0.4, rng);
    CHECK(plan.count_masked() == 4);
    CHECK(plan.at_flat(3));  // maskable index 2 = position 3
    CHECK(plan.at_flat(4));
    CHECK_FALSE(plan.at_flat(0));
    CHECK_FALSE(plan.at_flat(11));
    CHECK_FALSE(plan.at_flat(12));
  }
  {
    // Span larger than the delta budget wins.
    Rng rng(1);
    const MaskPlan plan = referring_text_mask(maskable, std::make_pair(0u, 7u), 0.2, rng);
    CHECK(plan.count_masked() == 7);
  }
  {
    Rng rng(1);
    CHECK_THROWS_AS(referring_text_mask(maskable, std::make_pair(5u, 11u), 0.4, rng), Error);
    try {
      Rng rng2(1);
      referring_text_mask(maskable, std::make_pair(5u, 11u), 0.4, rng2);
    } catch (const Error& e) {
      CHECK(e.code() == "SpanOutOfBounds");
    }
  }
  {
    // Specials (maskable = 0) are never masked, any seed.
    for (uint64_t s = 0; s < 50; ++s) {
      Rng rng(s);
      const MaskPlan plan = referring_text_mask(maskable, std::nullopt, 1.0, rng);
      CHECK(plan.count_masked() == 10);
      CHECK_FALSE(plan.at_flat(0));
      CHECK_FALSE(plan.at_flat(11));
    }
  }
}

TEST_CASE("mask plan serialization round-trips") {
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const uint32_t h = 1 + static_cast<uint32_t>(rng.below(12));
    const uint32_t w = 1 + static_cast<uint32_t>(rng.below(12));
    MaskPlan plan(h, w);
    for (uint32_t c = 0; c < plan.size(); ++c) plan.set_flat(c, rng.uniform() < 0.5);
    CHECK(MaskPlan::deserialize(plan.serialize()) == plan);
  }
  const MaskPlan demo = MaskPlan::deserialize("2 3 010110");
  CHECK(demo.grid_h == 2);
  CHECK(demo.grid_w == 3);
  CHECK(demo.count_masked() == 3);
  CHECK_THROWS_AS(MaskPlan::deserialize("2 3 01011"), Error);
}
