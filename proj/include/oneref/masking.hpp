#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "oneref/geometry.hpp"
#include "oneref/mask_plan.hpp"
#include "oneref/rng.hpp"

namespace oneref {

// Mask-ratio hyperparameters. beta applies outside the referred region,
// gamma inside it, delta to text tokens; aspect_a bounds block aspect ratios.
struct MaskingConfig {
  double beta = 0.35;
  double gamma = 0.75;
  double aspect_a = 0.3;
  uint32_t margin = 1;
  double delta = 0.40;
  uint64_t seed = 0;
};

// Overall masking ratio alpha = [beta*(N_v - N_r) + gamma*N_r] / N_v.
double dynamic_ratio(const PatchGrid& grid, const PatchRegion& region, double beta, double gamma);

// Referring-aware dynamic masking: uniform random masking of floor(beta*N_v)
// cells over the whole grid, then the region rectangle is overwritten by a
// block-wise mask grown until its count exceeds gamma*N_r.
MaskPlan referring_dynamic_mask(const PatchGrid& grid, const PatchRegion& region,
                                const MaskingConfig& cfg, Rng& rng);

// Exactly floor(ratio*n) distinct cells, uniform without replacement.
MaskPlan random_mask(uint32_t n, double ratio, Rng& rng);

// Block-wise masking over the whole grid (the in-region loop of the dynamic
// strategy applied globally).
MaskPlan blockwise_mask(const PatchGrid& grid, double ratio, double aspect_a, Rng& rng);

// Text masking over a fixed-length token sequence. maskable[i] marks the
// positions that may be masked (special tokens excluded by the caller).
// subject_span is a [start, end) range over maskable word positions that is
// masked first; remaining picks are uniform until ceil(delta * maskable_len)
// positions are masked (the span is kept even if it alone exceeds the count).
MaskPlan referring_text_mask(const std::vector<uint8_t>& maskable,
                             std::optional<std::pair<uint32_t, uint32_t>> subject_span,
                             double delta, Rng& rng);

}  // namespace oneref
