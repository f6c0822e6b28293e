#pragma once

// Minimal 8-bit grayscale PNG output and raster helpers for heatmaps and
// line plots.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/errors.hpp"

namespace stgfsl {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage(int w, int h, std::uint8_t fill = 255) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  void set(int x, int y, std::uint8_t v) {
    if (x >= 0 && y >= 0 && x < width && y < height) pixels[static_cast<std::size_t>(y) * width + x] = v;
  }

  void line(int x0, int y0, int x1, int y1, std::uint8_t v) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, v);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

namespace png_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
}

inline void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace png_detail

inline void write_png(const GrayImage& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.width + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * img.width,
               img.pixels.begin() + static_cast<std::ptrdiff_t>(y + 1) * img.width);
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_size);
  if (compress(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size())) != Z_OK)
    throw Error("png: compression failed");
  packed.resize(packed_size);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  png_detail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  png_detail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale
  png_detail::chunk(out, "IHDR", ihdr);
  png_detail::chunk(out, "IDAT", packed);
  png_detail::chunk(out, "IEND", {});
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

// Values in [0, 1] → dark for 1, white for 0; each cell becomes cell×cell pixels.
inline GrayImage heatmap(const MatD& m, int cell = 8) {
  GrayImage img(static_cast<int>(m.cols()) * cell, static_cast<int>(m.rows()) * cell);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = std::clamp(m(i, j), 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)));
      for (int dy = 0; dy < cell; ++dy)
        for (int dx = 0; dx < cell; ++dx) img.set(static_cast<int>(j) * cell + dx, static_cast<int>(i) * cell + dy, g);
    }
  return img;
}

// Curves share one y scale; curve k is drawn with gray level shades[k].
inline GrayImage line_plot(const std::vector<std::vector<double>>& curves, const std::vector<std::uint8_t>& shades,
                           int width = 640, int height = 360) {
  GrayImage img(width, height);
  const int margin = 20;
  double lo = INFINITY, hi = -INFINITY;
  std::size_t longest = 0;
  for (const auto& c : curves) {
    longest = std::max(longest, c.size());
    for (double v : c)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  img.line(margin, height - margin, width - margin, height - margin, 0);
  img.line(margin, margin, margin, height - margin, 0);
  if (longest < 2 || !(hi > lo)) return img;
  const auto px = [&](std::size_t k) {
    return margin + static_cast<int>(std::lround(static_cast<double>(k) / static_cast<double>(longest - 1) * (width - 2 * margin)));
  };
  const auto py = [&](double v) {
    return height - margin - static_cast<int>(std::lround((v - lo) / (hi - lo) * (height - 2 * margin)));
  };
  for (std::size_t c = 0; c < curves.size(); ++c)
    for (std::size_t k = 1; k < curves[c].size(); ++k)
      img.line(px(k - 1), py(curves[c][k - 1]), px(k), py(curves[c][k]), shades[c % shades.size()]);
  return img;
}

}  // namespace stgfsl
