#include "oneref/masking.hpp"

#include <algorithm>
#include <cmath>

#include "oneref/error.hpp"

namespace oneref {

double dynamic_ratio(const PatchGrid& grid, const PatchRegion& region, double beta, double gamma) {
  const double n_v = grid.num_patches();
  const double n_r = region.num_patches();
  return (beta * (n_v - n_r) + gamma * n_r) / n_v;
}

namespace {

// The block-growing loop shared by the in-region mask and blockwise_mask.
// Grows rectangular blocks inside a h_rp x w_rp window until the number of
// unique masked cells exceeds gamma * n_cells (never past n_cells).
void grow_blocks(MaskPlan& window, double gamma, double aspect_a, Rng& rng) {
  const uint32_t n_cells = window.size();
  const double target = gamma * n_cells;
  if (gamma <= 0.0) return;
  uint32_t count = window.count_masked();
  while (count <= target && count < n_cells) {
    const double remaining = target - count;
    const double s = remaining < 1.0 ? 1.0 : rng.uniform(1.0, remaining);
    const double r = rng.log_uniform(aspect_a, 1.0 / aspect_a);
    uint32_t w_b = std::max<int64_t>(1, std::llround(std::sqrt(s / r)));
    uint32_t h_b = std::max<int64_t>(1, std::llround(std::sqrt(s * r)));
    w_b = std::min(w_b, window.grid_w);
    h_b = std::min(h_b, window.grid_h);
    const uint32_t left = static_cast<uint32_t>(rng.range_inclusive(0, window.grid_w - w_b));
    const uint32_t top = static_cast<uint32_t>(rng.range_inclusive(0, window.grid_h - h_b));
    for (uint32_t y = top; y < top + h_b; ++y) {
      for (uint32_t x = left; x < left + w_b; ++x) {
        if (!window.at(y, x)) {
          window.set(y, x, true);
          ++count;
        }
      }
    }
  }
}

}  // namespace

MaskPlan random_mask(uint32_t n, double ratio, Rng& rng) {
  MaskPlan plan(1, n);
  const uint32_t k = static_cast<uint32_t>(std::floor(ratio * n));
  if (k == 0) return plan;
  // Partial Fisher-Yates over the index vector.
  std::vector<uint32_t> idx(n);
  for (uint32_t i = 0; i < n; ++i) idx[i] = i;
  for (uint32_t i = 0; i < k; ++i) {
    const uint32_t j = i + static_cast<uint32_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    plan.set_flat(idx[i], true);
  }
  return plan;
}

MaskPlan blockwise_mask(const PatchGrid& grid, double ratio, double aspect_a, Rng& rng) {
  MaskPlan plan(grid.grid_h, grid.grid_w);
  grow_blocks(plan, ratio, aspect_a, rng);
  return plan;
}

MaskPlan referring_dynamic_mask(const PatchGrid& grid, const PatchRegion& region,
                                const MaskingConfig& cfg, Rng& rng) {
  // In-context masking: floor(beta * N_v) uniform picks over the whole grid.
  MaskPlan flat = random_mask(grid.num_patches(), cfg.beta, rng);
  MaskPlan plan(grid.grid_h, grid.grid_w);
  plan.cells = std::move(flat.cells);

  // Referred masking: block-wise window grown to gamma * N_r, then the
  // region rectangle is overwritten (random in-region picks are discarded).
  MaskPlan window(region.h_rp, region.w_rp);
  grow_blocks(window, cfg.gamma, cfg.aspect_a, rng);
  for (uint32_t y = 0; y < region.h_rp; ++y) {
    for (uint32_t x = 0; x < region.w_rp; ++x) {
      const int64_t gy = region.y_sp + y;
      const int64_t gx = region.x_sp + x;
      if (gy < 0 || gy >= grid.grid_h || gx < 0 || gx >= grid.grid_w) continue;
      plan.set(static_cast<uint32_t>(gy), static_cast<uint32_t>(gx), window.at(y, x));
    }
  }
  return plan;
}

MaskPlan referring_text_mask(const std::vector<uint8_t>& maskable,
                             std::optional<std::pair<uint32_t, uint32_t>> subject_span,
                             double delta, Rng& rng) {
  const uint32_t seq_len = static_cast<uint32_t>(maskable.size());
  MaskPlan plan(1, seq_len);

  std::vector<uint32_t> maskable_pos;
  for (uint32_t i = 0; i < seq_len; ++i)
    if (maskable[i]) maskable_pos.push_back(i);
  const uint32_t m_len = static_cast<uint32_t>(maskable_pos.size());

  uint32_t count = 0;
  if (subject_span) {
    const auto [s, e] = *subject_span;
    if (s > e || e > m_len)
      fail("SpanOutOfBounds", "span [" + std::to_string(s) + "," + std::to_string(e) +
                                  ") over " + std::to_string(m_len) + " maskable tokens");
    for (uint32_t i = s; i < e; ++i) {
      plan.set_flat(maskable_pos[i], true);
      ++count;
    }
  }

  const uint32_t target = static_cast<uint32_t>(std::ceil(delta * m_len));
  if (count >= target) return plan;

  std::vector<uint32_t> rest;
  for (uint32_t p : maskable_pos)
    if (!plan.at_flat(p)) rest.push_back(p);
  // Partial shuffle of the not-yet-masked positions.
  const uint32_t need = target - count;
  for (uint32_t i = 0; i < need && i < rest.size(); ++i) {
    const uint32_t j = i + static_cast<uint32_t>(rng.below(rest.size() - i));
    std::swap(rest[i], rest[j]);
    plan.set_flat(rest[i], true);
  }
  return plan;
}

}  // namespace oneref
