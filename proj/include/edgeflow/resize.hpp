// Corner-aligned bilinear resize, the single resampling convention used
// project-wide (pyramid accumulation, loss ground-truth downsizing and
// image resizing all share it). The adjoint is provided so the operator
// can sit inside the training graph.
#pragma once

#include "edgeflow/core.hpp"

namespace edgeflow {

namespace detail {

// src position for output index i under corner-aligned sampling
inline double align_pos(int i, int out_n, int in_n) {
  if (out_n <= 1) return 0.0;
  return double(i) * double(in_n - 1) / double(out_n - 1);
}

inline void resize_plane(const float* in, int in_h, int in_w, int ch, float* out, int out_h,
                         int out_w) {
  for (int oy = 0; oy < out_h; ++oy) {
    double sy = align_pos(oy, out_h, in_h);
    int y0 = int(sy);
    int y1 = std::min(y0 + 1, in_h - 1);
    float wy = float(sy - y0);
    for (int ox = 0; ox < out_w; ++ox) {
      double sx = align_pos(ox, out_w, in_w);
      int x0 = int(sx);
      int x1 = std::min(x0 + 1, in_w - 1);
      float wx = float(sx - x0);
      const float* p00 = in + (size_t(y0) * in_w + x0) * ch;
      const float* p01 = in + (size_t(y0) * in_w + x1) * ch;
      const float* p10 = in + (size_t(y1) * in_w + x0) * ch;
      const float* p11 = in + (size_t(y1) * in_w + x1) * ch;
      float* q = out + (size_t(oy) * out_w + ox) * ch;
      for (int c = 0; c < ch; ++c) {
        float top = p00[c] + wx * (p01[c] - p00[c]);
        float bot = p10[c] + wx * (p11[c] - p10[c]);
        q[c] = top + wy * (bot - top);
      }
    }
  }
}

// Adjoint of resize_plane: scatters d_out into d_in (accumulating).
inline void resize_plane_backward(const float* d_out, int out_h, int out_w, int ch, float* d_in,
                                  int in_h, int in_w) {
  for (int oy = 0; oy < out_h; ++oy) {
    double sy = align_pos(oy, out_h, in_h);
    int y0 = int(sy);
    int y1 = std::min(y0 + 1, in_h - 1);
    float wy = float(sy - y0);
    for (int ox = 0; ox < out_w; ++ox) {
      double sx = align_pos(ox, out_w, in_w);
      int x0 = int(sx);
      int x1 = std::min(x0 + 1, in_w - 1);
      float wx = float(sx - x0);
      const float* g = d_out + (size_t(oy) * out_w + ox) * ch;
      float* p00 = d_in + (size_t(y0) * in_w + x0) * ch;
      float* p01 = d_in + (size_t(y0) * in_w + x1) * ch;
      float* p10 = d_in + (size_t(y1) * in_w + x0) * ch;
      float* p11 = d_in + (size_t(y1) * in_w + x1) * ch;
      for (int c = 0; c < ch; ++c) {
        float w00 = (1.f - wy) * (1.f - wx), w01 = (1.f - wy) * wx;
        float w10 = wy * (1.f - wx), w11 = wy * wx;
        p00[c] += w00 * g[c];
        p01[c] += w01 * g[c];
        p10[c] += w10 * g[c];
        p11[c] += w11 * g[c];
      }
    }
  }
}

}  // namespace detail

inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: non-positive target dims");
  Image out(out_h, out_w, img.channels);
  detail::resize_plane(img.v.data(), img.height, img.width, img.channels, out.v.data(), out_h,
                       out_w);
  return out;
}

inline UncertaintyField resize_bilinear(const UncertaintyField& f, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: non-positive target dims");
  UncertaintyField out(out_h, out_w);
  detail::resize_plane(f.v.data(), f.height, f.width, 1, out.v.data(), out_h, out_w);
  return out;
}

// When scale_flow_values is set, u is multiplied by out_w/in_w and v by
// out_h/in_h so displacements stay expressed in target-resolution pixels.
inline FlowField resize_bilinear(const FlowField& f, int out_h, int out_w,
                                 bool scale_flow_values = true) {
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: non-positive target dims");
  FlowField out(out_h, out_w);
  detail::resize_plane(f.uv.data(), f.height, f.width, 2, out.uv.data(), out_h, out_w);
  if (scale_flow_values) {
    float su = float(out_w) / float(f.width);
    float sv = float(out_h) / float(f.height);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        out.u(y, x) *= su;
        out.v(y, x) *= sv;
      }
  }
  return out;
}

}  // namespace edgeflow
