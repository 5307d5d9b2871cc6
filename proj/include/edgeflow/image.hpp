// 8-bit image file I/O (binary PPM/PGM) and [0,1] <-> 8-bit conversion.
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>

#include "edgeflow/core.hpp"

namespace edgeflow {

inline uint8_t to_u8(float x) {
  float s = x * 255.f;
  if (s <= 0.f) return 0;
  if (s >= 255.f) return 255;
  return uint8_t(s + 0.5f);
}

inline float from_u8(uint8_t b) { return float(b) * (1.f / 255.f); }

// Writes P5 (1 channel) or P6 (3 channels), maxval 255.
inline void image_write(const Image& img, const std::string& path) {
  require(img.channels == 1 || img.channels == 3, "image_write: channels must be 1 or 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("image_write: cannot open " + path);
  os << (img.channels == 1 ? "P5" : "P6") << "\n"
     << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[size_t(x) * img.channels + c] = to_u8(img.at(y, x, c));
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw io_error("image_write: write failed for " + path);
}

namespace detail {
inline int ppm_next_int(std::istream& is, const std::string& path) {
  // skips whitespace and '#' comment lines between header tokens
  int ch = is.get();
  while (ch == '#' || std::isspace(ch)) {
    if (ch == '#') {
      while (ch != '\n' && ch != EOF) ch = is.get();
    }
    ch = is.get();
  }
  if (ch == EOF) throw format_error("image_read: truncated header in " + path);
  int value = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    any = true;
    ch = is.get();
  }
  if (!any) throw format_error("image_read: bad header token in " + path);
  return value;
}
}  // namespace detail

inline Image image_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("image_read: cannot open " + path);
  char m0 = char(is.get()), m1 = char(is.get());
  int channels;
  if (m0 == 'P' && m1 == '5') channels = 1;
  else if (m0 == 'P' && m1 == '6') channels = 3;
  else throw format_error("image_read: " + path + " is not a binary PGM/PPM (bad magic)");
  int w = detail::ppm_next_int(is, path);
  int h = detail::ppm_next_int(is, path);
  int maxval = detail::ppm_next_int(is, path);
  if (maxval != 255) throw format_error("image_read: only maxval 255 supported in " + path);
  Image img(h, w, channels);
  std::vector<uint8_t> buf(size_t(h) * w * channels);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (size_t(is.gcount()) != buf.size())
    throw format_error("image_read: truncated pixel data in " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.v[i] = from_u8(buf[i]);
  return img;
}

inline void mask_write(const Mask& mask, const std::string& path) {
  Image img(mask.height, mask.width, 1);
  for (size_t i = 0; i < mask.m.size(); ++i) img.v[i] = mask.m[i] ? 1.f : 0.f;
  image_write(img, path);
}

inline Mask mask_read(const std::string& path) {
  Image img = image_read(path);
  require(img.channels == 1, "mask_read: expected grayscale file");
  Mask mask(img.height, img.width);
  for (size_t i = 0; i < img.v.size(); ++i) mask.m[i] = img.v[i] > 0.5f ? 1 : 0;
  return mask;
}

}  // namespace edgeflow
