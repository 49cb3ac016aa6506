#include "oneref/mask_plan.hpp"

#include <algorithm>
#include <sstream>

#include "oneref/error.hpp"

namespace oneref {

uint32_t MaskPlan::count_masked() const {
  uint32_t n = 0;
  for (uint8_t c : cells) n += c != 0;
  return n;
}

std::vector<uint32_t> MaskPlan::masked_indices() const {
  std::vector<uint32_t> idx;
  idx.reserve(count_masked());
  for (uint32_t i = 0; i < size(); ++i)
    if (cells[i]) idx.push_back(i);
  return idx;
}

std::string MaskPlan::serialize() const {
  std::string out = std::to_string(grid_h) + " " + std::to_string(grid_w) + " ";
  out.reserve(out.size() + size());
  for (uint32_t i = 0; i < size(); ++i) out.push_back(cells[i] ? '1' : '0');
  return out;
}

MaskPlan MaskPlan::deserialize(const std::string& line) {
  std::istringstream ss(line);
  uint32_t h = 0, w = 0;
  std::string bits;
  if (!(ss >> h >> w >> bits)) fail("ParseError", "bad mask plan line: " + line);
  if (bits.size() != size_t(h) * w)
    fail("ParseError", "mask plan bitstring length " + std::to_string(bits.size()) +
                           " does not match " + std::to_string(h) + "x" + std::to_string(w));
  MaskPlan plan(h, w);
  for (uint32_t i = 0; i < plan.size(); ++i) {
    if (bits[i] != '0' && bits[i] != '1') fail("ParseError", "mask plan bit not 0/1");
    plan.cells[i] = bits[i] == '1';
  }
  return plan;
}

bool operator==(const MaskPlan& a, const MaskPlan& b) {
  return a.grid_h == b.grid_h && a.grid_w == b.grid_w && a.cells == b.cells;
}

}  // namespace oneref
