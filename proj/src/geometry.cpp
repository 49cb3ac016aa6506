#include "oneref/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "oneref/error.hpp"

namespace oneref {

Box Box::from_corners(double x1, double y1, double x2, double y2) {
  Box b;
  b.x_c = 0.5 * (x1 + x2);
  b.y_c = 0.5 * (y1 + y2);
  b.w_r = x2 - x1;
  b.h_r = y2 - y1;
  return b;
}

std::array<double, 4> Box::to_corners() const {
  return {x_c - 0.5 * w_r, y_c - 0.5 * h_r, x_c + 0.5 * w_r, y_c + 0.5 * h_r};
}

Box Box::clip_to_unit() const {
  auto [x1, y1, x2, y2] = to_corners();
  x1 = std::clamp(x1, 0.0, 1.0);
  y1 = std::clamp(y1, 0.0, 1.0);
  x2 = std::clamp(x2, 0.0, 1.0);
  y2 = std::clamp(y2, 0.0, 1.0);
  return from_corners(x1, y1, x2, y2);
}

bool Box::contains(double x, double y) const {
  auto [x1, y1, x2, y2] = to_corners();
  return x >= x1 && x <= x2 && y >= y1 && y <= y2;
}

PatchGrid::PatchGrid(uint32_t image_h_px, uint32_t image_w_px, uint32_t patch_px)
    : image_h(image_h_px), image_w(image_w_px), patch(patch_px) {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
    fail("BadImageShape", "image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                              " is not a multiple of patch " + std::to_string(patch));
  grid_h = image_h / patch;
  grid_w = image_w / patch;
}

PatchRegion box_to_patch_region(const Box& box, const PatchGrid& grid, uint32_t margin) {
  const double P = grid.patch;
  const auto [x1, y1, x2, y2] = box.to_corners();
  const double x_s = x1 * grid.image_w;
  const double y_s = y1 * grid.image_h;
  const double w_px = box.w_r * grid.image_w;
  const double h_px = box.h_r * grid.image_h;
  const int32_t m = static_cast<int32_t>(margin);

  int64_t x_sp = static_cast<int64_t>(std::floor(x_s / P)) - m;
  int64_t y_sp = static_cast<int64_t>(std::floor(y_s / P)) - m;
  int64_t w_rp = static_cast<int64_t>(std::floor(w_px / P)) + m;
  int64_t h_rp = static_cast<int64_t>(std::floor(h_px / P)) + m;

  // Clamp into the grid; keep the extent measured from the clamped start.
  const int64_t gw = grid.grid_w, gh = grid.grid_h;
  if (x_sp < 0) {
    w_rp += x_sp;
    x_sp = 0;
  }
  if (y_sp < 0) {
    h_rp += y_sp;
    y_sp = 0;
  }
  x_sp = std::min(x_sp, gw - 1);
  y_sp = std::min(y_sp, gh - 1);
  w_rp = std::min(w_rp, gw - x_sp);
  h_rp = std::min(h_rp, gh - y_sp);

  // Degenerate boxes snap to the single patch containing the center.
  if (w_rp < 1) {
    x_sp = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.x_c * grid.image_w / P)), 0, gw - 1);
    w_rp = 1;
  }
  if (h_rp < 1) {
    y_sp = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.y_c * grid.image_h / P)), 0, gh - 1);
    h_rp = 1;
  }

  PatchRegion r;
  r.x_sp = static_cast<int32_t>(x_sp);
  r.y_sp = static_cast<int32_t>(y_sp);
  r.w_rp = static_cast<uint32_t>(w_rp);
  r.h_rp = static_cast<uint32_t>(h_rp);
  return r;
}

namespace {

double intersection_area(const Box& a, const Box& b) {
  const auto ca = a.to_corners();
  const auto cb = b.to_corners();
  const double iw = std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]);
  const double ih = std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double enclosing_area(const Box& a, const Box& b) {
  const auto ca = a.to_corners();
  const auto cb = b.to_corners();
  const double ew = std::max(ca[2], cb[2]) - std::min(ca[0], cb[0]);
  const double eh = std::max(ca[3], cb[3]) - std::min(ca[1], cb[1]);
  return ew * eh;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  const double enc = enclosing_area(a, b);
  if (enc <= 0.0) return inter / uni;
  return inter / uni - (enc - uni) / enc;
}

MaskPlan box_to_raster_mask(const Box& box, uint32_t grid_h, uint32_t grid_w) {
  MaskPlan plan(grid_h, grid_w);
  for (uint32_t r = 0; r < grid_h; ++r) {
    const double cy = (r + 0.5) / grid_h;
    for (uint32_t c = 0; c < grid_w; ++c) {
      const double cx = (c + 0.5) / grid_w;
      plan.set(r, c, box.contains(cx, cy));
    }
  }
  return plan;
}

}  // namespace oneref
