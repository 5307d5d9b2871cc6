// Middlebury .flo interchange and the standard flow color wheel.
//
// File layout: 4-byte magic "PIEH", 4-byte little-endian int32 width,
// 4-byte little-endian int32 height, then row-major interleaved (u,v)
// pairs as little-endian IEEE float32.
#pragma once

#include <array>
#include <cstring>
#include <fstream>

#include "edgeflow/core.hpp"
#include "edgeflow/image.hpp"

namespace edgeflow {

inline void flo_write(const FlowField& field, const std::string& path) {
  require(all_finite(field.uv), "flo_write: field has non-finite values");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("flo_write: cannot open " + path);
  os.write("PIEH", 4);
  int32_t w = field.width, h = field.height;
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(field.uv.data()),
           std::streamsize(field.uv.size() * sizeof(float)));
  if (!os) throw io_error("flo_write: write failed for " + path);
}

inline FlowField flo_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("flo_read: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4)
    throw format_error("flo_read: " + path + ": truncated at byte offset 0 (magic)");
  if (std::memcmp(magic, "PIEH", 4) != 0)
    throw format_error("flo_read: " + path + ": bad magic at byte offset 0");
  int32_t w = 0, h = 0;
  is.read(reinterpret_cast<char*>(&w), 4);
  if (is.gcount() != 4) throw format_error("flo_read: " + path + ": truncated at byte offset 4 (width)");
  is.read(reinterpret_cast<char*>(&h), 4);
  if (is.gcount() != 4) throw format_error("flo_read: " + path + ": truncated at byte offset 8 (height)");
  if (w < 1 || h < 1 || w > 1 << 20 || h > 1 << 20)
    throw format_error("flo_read: " + path + ": implausible dims " + std::to_string(w) + "x" +
                       std::to_string(h));
  FlowField field(h, w);
  std::streamsize want = std::streamsize(field.uv.size() * sizeof(float));
  is.read(reinterpret_cast<char*>(field.uv.data()), want);
  if (is.gcount() != want)
    throw format_error("flo_read: " + path + ": truncated payload at byte offset " +
                       std::to_string(12 + is.gcount()));
  return field;
}

// ---------------------------------------------------------------------------
// Middlebury-style color wheel (Baker et al. benchmark code): 55 hues over
// RY/YG/GC/CB/BM/MR arcs, magnitude mapped to saturation. Cosmetic output
// for `infer --viz`; not used by any metric.

namespace detail {
inline void make_color_wheel(std::vector<std::array<float, 3>>& wheel) {
  const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  wheel.clear();
  auto push = [&](float r, float g, float b) { wheel.push_back({r, g, b}); };
  for (int i = 0; i < RY; ++i) push(255, 255.f * i / RY, 0);
  for (int i = 0; i < YG; ++i) push(255 - 255.f * i / YG, 255, 0);
  for (int i = 0; i < GC; ++i) push(0, 255, 255.f * i / GC);
  for (int i = 0; i < CB; ++i) push(0, 255 - 255.f * i / CB, 255);
  for (int i = 0; i < BM; ++i) push(255.f * i / BM, 0, 255);
  for (int i = 0; i < MR; ++i) push(255, 0, 255 - 255.f * i / MR);
}
}  // namespace detail

// max_mag <= 0 auto-scales to the field's own maximum magnitude.
inline Image flow_to_color(const FlowField& field, float max_mag = -1.f) {
  static std::vector<std::array<float, 3>> wheel;
  if (wheel.empty()) detail::make_color_wheel(wheel);
  const int n_cols = int(wheel.size());
  if (max_mag <= 0.f) {
    for (int y = 0; y < field.height; ++y)
      for (int x = 0; x < field.width; ++x)
        max_mag = std::max(max_mag, std::hypot(field.u(y, x), field.v(y, x)));
    if (max_mag <= 0.f) max_mag = 1.f;
  }
  Image img(field.height, field.width, 3);
  for (int y = 0; y < field.height; ++y)
    for (int x = 0; x < field.width; ++x) {
      float fu = field.u(y, x) / max_mag, fv = field.v(y, x) / max_mag;
      float rad = std::hypot(fu, fv);
      float angle = std::atan2(-fv, -fu) / 3.14159265358979323846f;
      float fk = (angle + 1.f) / 2.f * (n_cols - 1);
      int k0 = int(fk) % n_cols;
      int k1 = (k0 + 1) % n_cols;
      float f = fk - std::floor(fk);
      for (int c = 0; c < 3; ++c) {
        float col = ((1.f - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.f;
        col = rad <= 1.f ? 1.f - rad * (1.f - col) : col * 0.75f;
        img.at(y, x, c) = col;
      }
    }
  return img;
}

}  // namespace edgeflow
