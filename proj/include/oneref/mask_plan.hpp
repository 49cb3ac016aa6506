#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace oneref {

// Boolean mask over a patch grid (images) or a token sequence (text, with
// grid_h = 1). Row-major; true means masked.
struct MaskPlan {
  uint32_t grid_h = 0;
  uint32_t grid_w = 0;
  std::vector<uint8_t> cells;

  MaskPlan() = default;
  MaskPlan(uint32_t h, uint32_t w) : grid_h(h), grid_w(w), cells(size_t(h) * w, 0) {}

  uint32_t size() const { return grid_h * grid_w; }
  bool at(uint32_t row, uint32_t col) const { return cells[size_t(row) * grid_w + col] != 0; }
  void set(uint32_t row, uint32_t col, bool v) { cells[size_t(row) * grid_w + col] = v ? 1 : 0; }
  bool at_flat(uint32_t i) const { return cells[i] != 0; }
  void set_flat(uint32_t i, bool v) { cells[i] = v ? 1 : 0; }

  uint32_t count_masked() const;

  // Indices (row-major) of masked cells, ascending.
  std::vector<uint32_t> masked_indices() const;

  // One-line text format: "h w bitstring", row-major '0'/'1'.
  std::string serialize() const;
  static MaskPlan deserialize(const std::string& line);
};

bool operator==(const MaskPlan& a, const MaskPlan& b);

}  // namespace oneref
