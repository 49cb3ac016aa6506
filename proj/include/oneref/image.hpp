#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oneref/tensor.hpp"

namespace oneref {

// Interleaved 8-bit RGB raster.
struct ImageU8 {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> pix;  // h * w * 3

  ImageU8() = default;
  ImageU8(int height, int width) : h(height), w(width), pix(size_t(height) * width * 3, 0) {}
};

// Binary PPM (P6, maxval 255).
ImageU8 read_ppm(const std::string& path);
void write_ppm(const ImageU8& img, const std::string& path);

// Interleaved f64 RGB in [0,1].
struct ImageF64 {
  int h = 0;
  int w = 0;
  std::vector<double> pix;

  ImageF64() = default;
  ImageF64(int height, int width) : h(height), w(width), pix(size_t(height) * width * 3, 0.0) {}

  double at(int y, int x, int c) const { return pix[(size_t(y) * w + x) * 3 + c]; }
  double& at(int y, int x, int c) { return pix[(size_t(y) * w + x) * 3 + c]; }
};

ImageF64 to_f64(const ImageU8& img);
ImageU8 to_u8(const ImageF64& img);

// Patch extraction for the convolution projection: rows are patches in
// row-major grid order, columns the P*P*3 pixel values of each patch.
Tensor extract_patches(const ImageF64& img, int patch);

// Per-patch mean RGB, N_v x 3 (input to the toy visual tokenizer).
Tensor patch_mean_rgb(const ImageF64& img, int patch);

// Bilinear resample of the pixel rectangle [x0,x1) x [y0,y1) to out_w x out_h.
ImageF64 crop_resize_bilinear(const ImageF64& img, double x0, double y0, double x1, double y1,
                              int out_h, int out_w);

// Even-odd polygon fill sampled at pixel centers. verts is a flat
// x0,y0,x1,y1,... list in pixel coordinates; returns h*w bytes (1 = inside).
std::vector<uint8_t> rasterize_polygon(const std::vector<double>& verts, int h, int w);

}  // namespace oneref
