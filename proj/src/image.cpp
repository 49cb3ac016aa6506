#include "oneref/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "oneref/error.hpp"

namespace oneref {

ImageU8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("MissingImage", path);
  std::string magic;
  is >> magic;
  if (magic != "P6") fail("ParseError", "not a P6 PPM: " + path);
  auto next_int = [&is, &path]() {
    // Skips whitespace and '#' comment lines.
    while (true) {
      const int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    int v = -1;
    is >> v;
    if (!is || v < 0) fail("ParseError", "bad PPM header in " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) fail("ParseError", "unsupported PPM maxval in " + path);
  is.get();  // single whitespace after header
  ImageU8 img(h, w);
  is.read(reinterpret_cast<char*>(img.pix.data()), img.pix.size());
  if (!is) fail("ParseError", "truncated PPM data in " + path);
  return img;
}

void write_ppm(const ImageU8& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("IoError", "cannot write " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pix.data()), img.pix.size());
  if (!os) fail("IoError", "write failure on " + path);
}

ImageF64 to_f64(const ImageU8& img) {
  ImageF64 out(img.h, img.w);
  for (size_t i = 0; i < img.pix.size(); ++i) out.pix[i] = img.pix[i] / 255.0;
  return out;
}

ImageU8 to_u8(const ImageF64& img) {
  ImageU8 out(img.h, img.w);
  for (size_t i = 0; i < img.pix.size(); ++i) {
    const double v = std::clamp(img.pix[i], 0.0, 1.0);
    out.pix[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

Tensor extract_patches(const ImageF64& img, int patch) {
  if (patch <= 0 || img.h % patch != 0 || img.w % patch != 0)
    fail("BadImageShape", "image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                              " vs patch " + std::to_string(patch));
  const int gh = img.h / patch, gw = img.w / patch;
  Tensor t(int64_t(gh) * gw, int64_t(patch) * patch * 3);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int64_t row = int64_t(gy) * gw + gx;
      int64_t col = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int c = 0; c < 3; ++c)
            t.at(row, col++) = img.at(gy * patch + py, gx * patch + px, c);
    }
  }
  return t;
}

Tensor patch_mean_rgb(const ImageF64& img, int patch) {
  if (patch <= 0 || img.h % patch != 0 || img.w % patch != 0)
    fail("BadImageShape", "image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                              " vs patch " + std::to_string(patch));
  const int gh = img.h / patch, gw = img.w / patch;
  const double inv = 1.0 / (patch * patch);
  Tensor t(int64_t(gh) * gw, 3);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int64_t row = int64_t(gy) * gw + gx;
      double acc[3] = {0, 0, 0};
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int c = 0; c < 3; ++c) acc[c] += img.at(gy * patch + py, gx * patch + px, c);
      for (int c = 0; c < 3; ++c) t.at(row, c) = acc[c] * inv;
    }
  }
  return t;
}

ImageF64 crop_resize_bilinear(const ImageF64& img, double x0, double y0, double x1, double y1,
                              int out_h, int out_w) {
  if (x1 <= x0 || y1 <= y0) fail("BadImageShape", "empty crop rectangle");
  ImageF64 out(out_h, out_w);
  const double sx = (x1 - x0) / out_w;
  const double sy = (y1 - y0) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = y0 + (oy + 0.5) * sy - 0.5;
    const int yi = static_cast<int>(std::floor(fy));
    const double wy = fy - yi;
    const int y0c = std::clamp(yi, 0, img.h - 1);
    const int y1c = std::clamp(yi + 1, 0, img.h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = x0 + (ox + 0.5) * sx - 0.5;
      const int xi = static_cast<int>(std::floor(fx));
      const double wx = fx - xi;
      const int x0c = std::clamp(xi, 0, img.w - 1);
      const int x1c = std::clamp(xi + 1, 0, img.w - 1);
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(y0c, x0c, c) * (1 - wx) + img.at(y0c, x1c, c) * wx;
        const double bot = img.at(y1c, x0c, c) * (1 - wx) + img.at(y1c, x1c, c) * wx;
        out.at(oy, ox, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

std::vector<uint8_t> rasterize_polygon(const std::vector<double>& verts, int h, int w) {
  if (verts.size() < 6 || verts.size() % 2 != 0)
    fail("ParseError", "polygon needs >= 3 vertices, got " + std::to_string(verts.size() / 2));
  const size_t n = verts.size() / 2;
  std::vector<uint8_t> mask(size_t(h) * w, 0);

  // Restrict scanning to the polygon's bounding rows/cols.
  double minx = verts[0], maxx = verts[0], miny = verts[1], maxy = verts[1];
  for (size_t i = 0; i < n; ++i) {
    minx = std::min(minx, verts[2 * i]);
    maxx = std::max(maxx, verts[2 * i]);
    miny = std::min(miny, verts[2 * i + 1]);
    maxy = std::max(maxy, verts[2 * i + 1]);
  }
  const int yb = std::max(0, static_cast<int>(std::floor(miny - 1)));
  const int ye = std::min(h - 1, static_cast<int>(std::ceil(maxy + 1)));
  const int xb = std::max(0, static_cast<int>(std::floor(minx - 1)));
  const int xe = std::min(w - 1, static_cast<int>(std::ceil(maxx + 1)));

  for (int y = yb; y <= ye; ++y) {
    const double cy = y + 0.5;
    for (int x = xb; x <= xe; ++x) {
      const double cx = x + 0.5;
      // Even-odd rule: count edges crossing the ray to +x.
      bool inside = false;
      for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = verts[2 * i], yi = verts[2 * i + 1];
        const double xj = verts[2 * j], yj = verts[2 * j + 1];
        if ((yi > cy) != (yj > cy)) {
          const double t = (cy - yi) / (yj - yi);
          if (cx < xi + t * (xj - xi)) inside = !inside;
        }
      }
      if (inside) mask[size_t(y) * w + x] = 1;
    }
  }
  return mask;
}

}  // namespace oneref
