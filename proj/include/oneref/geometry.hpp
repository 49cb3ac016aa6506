#pragma once

#include <array>
#include <cstdint>

#include "oneref/mask_plan.hpp"

namespace oneref {

// Axis-aligned box in normalized [0,1] image coordinates, center format
// (x_c, y_c, w_r, h_r). Corner format appears only at API edges.
struct Box {
  double x_c = 0.0;
  double y_c = 0.0;
  double w_r = 0.0;
  double h_r = 0.0;

  static Box from_corners(double x1, double y1, double x2, double y2);
  std::array<double, 4> to_corners() const;  // {x1, y1, x2, y2}

  // Clamps the corner extent into [0,1] and re-derives the center format.
  Box clip_to_unit() const;

  double area() const { return w_r * h_r; }
  bool valid() const { return w_r > 0.0 && h_r > 0.0; }
  bool contains(double x, double y) const;
};

// Patch tiling of an image: H and W must be exact multiples of P.
struct PatchGrid {
  uint32_t image_h = 0;
  uint32_t image_w = 0;
  uint32_t patch = 0;
  uint32_t grid_h = 0;
  uint32_t grid_w = 0;

  PatchGrid() = default;
  PatchGrid(uint32_t image_h_px, uint32_t image_w_px, uint32_t patch_px);

  uint32_t num_patches() const { return grid_h * grid_w; }
};

// Rectangle in patch units: start column/row plus extent. Always has
// positive area after box_to_patch_region.
struct PatchRegion {
  int32_t x_sp = 0;
  int32_t y_sp = 0;
  uint32_t w_rp = 0;
  uint32_t h_rp = 0;

  uint32_t num_patches() const { return w_rp * h_rp; }
};

// Floor-based conversion of a normalized box to patch coordinates with a
// margin extension, clamped to the grid. Degenerate boxes snap to the single
// patch containing the box center, so the result always has area >= 1.
PatchRegion box_to_patch_region(const Box& box, const PatchGrid& grid, uint32_t margin);

double iou(const Box& a, const Box& b);

// GIoU = IoU - |C \ (a u b)| / |C| with C the smallest enclosing box.
double giou(const Box& a, const Box& b);

// Boolean h x w raster: a cell is true iff its center lies inside the box.
MaskPlan box_to_raster_mask(const Box& box, uint32_t grid_h, uint32_t grid_w);

}  // namespace oneref
