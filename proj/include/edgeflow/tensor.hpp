// NHWC float tensors and the conv primitives the network is built from.
//
// Layout is performance-driven for a single CPU core: channels innermost so
// the inner loops are contiguous SAXPYs over cout, weights HWIO
// ([kh][kw][cin][cout]). The fast conv path blocks four output columns per
// weight load; border columns fall back to a checked scalar path. Reference
// kernels live in detail:: and back the equivalence tests.
//
// Backward input gradients reuse the forward kernels through conv/deconv
// duality: a stride-1 conv's input gradient is a conv with flipped+transposed
// weights, a stride-2 conv's is a transposed conv, and vice versa. Parameter
// gradients have their own blocked routines.
#pragma once

#include <cstring>

#include "edgeflow/core.hpp"

namespace edgeflow {

struct Tensor {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int n_, int h_, int w_, int c_)
      : n(n_), h(h_), w(w_), c(c_), v(size_t(n_) * h_ * w_ * c_, 0.f) {
    require(n_ > 0 && h_ > 0 && w_ > 0 && c_ > 0, "Tensor: dims must be positive");
  }
  size_t size() const { return v.size(); }
  float* at(int in_, int iy, int ix) { return &v[((size_t(in_) * h + iy) * w + ix) * c]; }
  const float* at(int in_, int iy, int ix) const {
    return &v[((size_t(in_) * h + iy) * w + ix) * c];
  }
  bool same_shape(const Tensor& o) const { return n == o.n && h == o.h && w == o.w && c == o.c; }
};

struct ConvParams {
  int kh = 3, kw = 3, cin = 1, cout = 1, stride = 1;
  bool transposed = false;
  std::vector<float> w;  // [kh][kw][cin][cout]
  std::vector<float> b;  // [cout]

  size_t weight_count() const { return size_t(kh) * kw * cin * cout; }
  size_t param_count() const { return weight_count() + cout; }
  void alloc() {
    w.assign(weight_count(), 0.f);
    b.assign(cout, 0.f);
  }
};

inline constexpr int kMaxChannels = 256;

namespace detail {

// TF-style SAME padding: out = ceil(in / stride)
inline int conv_out_dim(int in, int stride) { return (in + stride - 1) / stride; }
inline int conv_pad_beg(int in, int out, int k, int stride) {
  int total = std::max((out - 1) * stride + k - in, 0);
  return total / 2;
}

inline void check_conv_args(const Tensor& in, const ConvParams& p, const char* who) {
  require(in.c == p.cin, std::string(who) + ": input channels " + std::to_string(in.c) +
                             " != cin " + std::to_string(p.cin));
  require(p.cout <= kMaxChannels && p.cin <= kMaxChannels,
          std::string(who) + ": channel count exceeds kMaxChannels");
  require(p.w.size() == p.weight_count() && p.b.size() == size_t(p.cout),
          std::string(who) + ": unallocated or mis-sized params");
}

// [kh][kw][cin][cout] -> [kh][kw][cout][cin], optionally flipping the window
inline ConvParams dual_params(const ConvParams& p, bool flip, int stride, bool transposed) {
  ConvParams q;
  q.kh = p.kh;
  q.kw = p.kw;
  q.cin = p.cout;
  q.cout = p.cin;
  q.stride = stride;
  q.transposed = transposed;
  q.alloc();
  for (int ky = 0; ky < p.kh; ++ky)
    for (int kx = 0; kx < p.kw; ++kx) {
      const int sy = flip ? p.kh - 1 - ky : ky;
      const int sx = flip ? p.kw - 1 - kx : kx;
      const float* src = &p.w[(size_t(sy) * p.kw + sx) * p.cin * p.cout];
      float* dst = &q.w[(size_t(ky) * p.kw + kx) * p.cin * p.cout];
      for (int ci = 0; ci < p.cin; ++ci)
        for (int co = 0; co < p.cout; ++co)
          dst[size_t(co) * p.cin + ci] = src[size_t(ci) * p.cout + co];
    }
  return q;
}

inline Tensor conv2d_ref(const Tensor& in, const ConvParams& p) {
  check_conv_args(in, p, "conv2d_ref");
  const int oh = conv_out_dim(in.h, p.stride), ow = conv_out_dim(in.w, p.stride);
  const int pt = conv_pad_beg(in.h, oh, p.kh, p.stride);
  const int pl = conv_pad_beg(in.w, ow, p.kw, p.stride);
  Tensor out(in.n, oh, ow, p.cout);
  for (int bn = 0; bn < in.n; ++bn)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        float* acc = out.at(bn, oy, ox);
        std::copy(p.b.begin(), p.b.end(), acc);
        for (int ky = 0; ky < p.kh; ++ky) {
          const int iy = oy * p.stride + ky - pt;
          if (iy < 0 || iy >= in.h) continue;
          for (int kx = 0; kx < p.kw; ++kx) {
            const int ix = ox * p.stride + kx - pl;
            if (ix < 0 || ix >= in.w) continue;
            const float* xrow = in.at(bn, iy, ix);
            const float* wk = &p.w[(size_t(ky) * p.kw + kx) * p.cin * p.cout];
            for (int ci = 0; ci < p.cin; ++ci)
              for (int co = 0; co < p.cout; ++co)
                acc[co] += xrow[ci] * wk[size_t(ci) * p.cout + co];
          }
        }
      }
  return out;
}

inline Tensor deconv2d_ref(const Tensor& in, const ConvParams& p) {
  check_conv_args(in, p, "deconv2d_ref");
  const int oh = in.h * p.stride, ow = in.w * p.stride;
  const int crop = (p.kh - p.stride) / 2;
  Tensor out(in.n, oh, ow, p.cout);
  for (int bn = 0; bn < in.n; ++bn) {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) std::copy(p.b.begin(), p.b.end(), out.at(bn, oy, ox));
    for (int iy = 0; iy < in.h; ++iy)
      for (int ix = 0; ix < in.w; ++ix) {
        const float* xrow = in.at(bn, iy, ix);
        for (int ky = 0; ky < p.kh; ++ky) {
          const int oy = iy * p.stride - crop + ky;
          if (oy < 0 || oy >= oh) continue;
          for (int kx = 0; kx < p.kw; ++kx) {
            const int ox = ix * p.stride - crop + kx;
            if (ox < 0 || ox >= ow) continue;
            float* acc = out.at(bn, oy, ox);
            const float* wk = &p.w[(size_t(ky) * p.kw + kx) * p.cin * p.cout];
            for (int ci = 0; ci < p.cin; ++ci)
              for (int co = 0; co < p.cout; ++co)
                acc[co] += xrow[ci] * wk[size_t(ci) * p.cout + co];
          }
        }
      }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fast forward conv: per output row, the valid ky range is hoisted; columns
// where every kx tap is in bounds run a 4-wide blocked loop on a local
// accumulator (keeps the compiler free of aliasing hazards).

inline Tensor conv2d(const Tensor& in, const ConvParams& p) {
  require(!p.transposed, "conv2d: params are for a transposed conv");
  detail::check_conv_args(in, p, "conv2d");
  const int s = p.stride, KH = p.kh, KW = p.kw, CI = p.cin, CO = p.cout;
  const int oh = detail::conv_out_dim(in.h, s), ow = detail::conv_out_dim(in.w, s);
  const int pt = detail::conv_pad_beg(in.h, oh, KH, s);
  const int pl = detail::conv_pad_beg(in.w, ow, KW, s);
  Tensor out(in.n, oh, ow, CO);

  parallel_for(0, in.n, [&](int bn) {
    alignas(32) float acc[4 * kMaxChannels];
    // interior columns: ox*s - pl >= 0 and ox*s - pl + KW - 1 < in.w
    const int xi0 = std::min(ow, (pl + s - 1) / s);
    const int xi1 = std::min(ow - 1, (in.w - KW + pl) / s);  // inclusive
    for (int oy = 0; oy < oh; ++oy) {
      const int ky0 = std::max(0, pt - oy * s);
      const int ky1 = std::min(KH, in.h + pt - oy * s);
      auto edge_col = [&](int ox) {
        std::copy(p.b.begin(), p.b.end(), acc);
        for (int ky = ky0; ky < ky1; ++ky) {
          const int iy = oy * s + ky - pt;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * s + kx - pl;
            if (ix < 0 || ix >= in.w) continue;
            const float* xrow = in.at(bn, iy, ix);
            const float* wk = &p.w[(size_t(ky) * KW + kx) * CI * CO];
            for (int ci = 0; ci < CI; ++ci) {
              const float a = xrow[ci];
              const float* wr = wk + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co) acc[co] += a * wr[co];
            }
          }
        }
        std::memcpy(out.at(bn, oy, ox), acc, sizeof(float) * CO);
      };
      int ox = 0;
      for (; ox < xi0; ++ox) edge_col(ox);
      for (; ox + 3 <= xi1; ox += 4) {
        for (int j = 0; j < 4; ++j) std::copy(p.b.begin(), p.b.end(), acc + j * CO);
        for (int ky = ky0; ky < ky1; ++ky) {
          const int iy = oy * s + ky - pt;
          const float* base = in.at(bn, iy, ox * s - pl);
          for (int kx = 0; kx < KW; ++kx) {
            const float* x0 = base + size_t(kx) * CI;
            const float* wk = &p.w[(size_t(ky) * KW + kx) * CI * CO];
            const size_t step = size_t(s) * CI;
            for (int ci = 0; ci < CI; ++ci) {
              const float a0 = x0[ci];
              const float a1 = x0[step + ci];
              const float a2 = x0[2 * step + ci];
              const float a3 = x0[3 * step + ci];
              const float* wr = wk + size_t(ci) * CO;
              float* c0 = acc;
              float* c1 = acc + CO;
              float* c2 = acc + 2 * CO;
              float* c3 = acc + 3 * CO;
              for (int co = 0; co < CO; ++co) {
                const float wv = wr[co];
                c0[co] += a0 * wv;
                c1[co] += a1 * wv;
                c2[co] += a2 * wv;
                c3[co] += a3 * wv;
              }
            }
          }
        }
        std::memcpy(out.at(bn, oy, ox), acc, sizeof(float) * 4 * CO);
      }
      for (; ox < ow; ++ox) edge_col(ox);
    }
  });
  return out;
}

// Gather formulation of the transposed conv: per output row, the valid taps
// are those with oy == iy*s - crop + ky. Tap order matches the scatter
// formulation (iy ascending means ky descending, likewise kx), keeping
// results bit-identical to deconv2d_ref.
inline Tensor deconv2d(const Tensor& in, const ConvParams& p) {
  require(p.transposed, "deconv2d: params are for a regular conv");
  detail::check_conv_args(in, p, "deconv2d");
  const int s = p.stride, KH = p.kh, KW = p.kw, CI = p.cin, CO = p.cout;
  require(KH >= s && KW >= s, "deconv2d: kernel smaller than stride");
  require(KH <= 8, "deconv2d: kernel height above 8 unsupported");
  const int oh = in.h * s, ow = in.w * s;
  const int crop = (KH - s) / 2;  // odd surplus is cropped at the far edge, TF SAME style
  Tensor out(in.n, oh, ow, CO);
  parallel_for(0, in.n, [&](int bn) {
    alignas(32) float acc[8 * kMaxChannels];
    for (int oy = 0; oy < oh; ++oy) {
      int kys[8], nky = 0;
      for (int ky = KH - 1; ky >= 0; --ky) {
        const int t = oy + crop - ky;
        if (t >= 0 && t % s == 0 && t / s < in.h) kys[nky++] = ky;
      }
      auto edge_col = [&](int ox) {
        float* q = out.at(bn, oy, ox);
        std::copy(p.b.begin(), p.b.end(), q);
        for (int i = 0; i < nky; ++i) {
          const int ky = kys[i];
          const int iy = (oy + crop - ky) / s;
          for (int kx = KW - 1; kx >= 0; --kx) {
            const int t = ox + crop - kx;
            if (t < 0 || t % s != 0 || t / s >= in.w) continue;
            const float* xrow = in.at(bn, iy, t / s);
            const float* wk = &p.w[(size_t(ky) * KW + kx) * CI * CO];
            for (int ci = 0; ci < CI; ++ci) {
              const float a = xrow[ci];
              const float* wr = wk + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co) q[co] += a * wr[co];
            }
          }
        }
      };
      // interior: every kx of matching parity in range for each block column
      int x_lo = ow, x_hi = -1;
      for (int ox = 0; ox < ow; ++ox) {
        bool full = true;
        for (int kx = 0; kx < KW && full; ++kx) {
          const int t = ox + crop - kx;
          if (t % s == 0 && (t < 0 || t / s >= in.w)) full = false;
        }
        if (full) {
          x_lo = std::min(x_lo, ox);
          x_hi = std::max(x_hi, ox);
        }
      }
      int ox = 0;
      for (; ox < std::min(x_lo, ow); ++ox) edge_col(ox);
      // 8 consecutive output columns per block: with s=2, each kx serves the 4
      // columns of its parity, giving the same inner shape as the conv kernel
      for (; ox + 7 <= x_hi && ox >= x_lo && s == 2; ox += 8) {
        for (int j = 0; j < 8; ++j) std::copy(p.b.begin(), p.b.end(), acc + j * CO);
        for (int i = 0; i < nky; ++i) {
          const int ky = kys[i];
          const int iy = (oy + crop - ky) / s;
          for (int kx = KW - 1; kx >= 0; --kx) {
            const int j0 = ((ox + crop - kx) % 2 + 2) % 2;  // first matching column
            const int ix = (ox + j0 + crop - kx) / 2;
            const float* x0 = in.at(bn, iy, ix);
            const float* wk = &p.w[(size_t(ky) * KW + kx) * CI * CO];
            float* c0 = acc + j0 * CO;
            float* c1 = c0 + 2 * CO;
            float* c2 = c0 + 4 * CO;
            float* c3 = c0 + 6 * CO;
            for (int ci = 0; ci < CI; ++ci) {
              const float a0 = x0[ci];
              const float a1 = x0[size_t(CI) + ci];
              const float a2 = x0[2 * size_t(CI) + ci];
              const float a3 = x0[3 * size_t(CI) + ci];
              const float* wr = wk + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co) {
                const float wv = wr[co];
                c0[co] += a0 * wv;
                c1[co] += a1 * wv;
                c2[co] += a2 * wv;
                c3[co] += a3 * wv;
              }
            }
          }
        }
        std::memcpy(out.at(bn, oy, ox), acc, sizeof(float) * 8 * CO);
      }
      for (; ox < ow; ++ox) edge_col(ox);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward passes.

// d_input via duality; supports the kernel/stride combinations the network
// uses (odd k at stride 1, k == stride + even surplus at stride 2).
inline Tensor conv2d_backward_input(const ConvParams& p, const Tensor& d_out, int in_h, int in_w) {
  if (p.stride == 1) {
    require(p.kh % 2 == 1 && p.kw % 2 == 1, "conv2d_backward_input: even kernel at stride 1");
    return conv2d(d_out, detail::dual_params(p, /*flip=*/true, 1, false));
  }
  require(p.stride == 2 && in_h == d_out.h * 2 && in_w == d_out.w * 2,
          "conv2d_backward_input: only stride-2 halving supported");
  return deconv2d(d_out, detail::dual_params(p, /*flip=*/false, 2, true));
}

inline Tensor deconv2d_backward_input(const ConvParams& p, const Tensor& d_out) {
  return conv2d(d_out, detail::dual_params(p, /*flip=*/false, p.stride, false));
}

// d_w/d_b accumulation for a regular conv, blocked like the forward pass.
inline void conv2d_backward_params(const Tensor& in, const ConvParams& p, const Tensor& d_out,
                                   std::vector<float>& d_w, std::vector<float>& d_b) {
  require(d_w.size() == p.weight_count() && d_b.size() == size_t(p.cout),
          "conv2d_backward_params: gradient buffer shape mismatch");
  const int s = p.stride, KH = p.kh, KW = p.kw, CI = p.cin, CO = p.cout;
  const int oh = d_out.h, ow = d_out.w;
  const int pt = detail::conv_pad_beg(in.h, oh, KH, s);
  const int pl = detail::conv_pad_beg(in.w, ow, KW, s);
  alignas(32) float gbuf[4 * kMaxChannels];
  const int xi0 = std::min(ow, (pl + s - 1) / s);
  const int xi1 = std::min(ow - 1, (in.w - KW + pl) / s);
  for (int bn = 0; bn < in.n; ++bn)
    for (int oy = 0; oy < oh; ++oy) {
      const int ky0 = std::max(0, pt - oy * s);
      const int ky1 = std::min(KH, in.h + pt - oy * s);
      auto edge_col = [&](int ox) {
        const float* g = d_out.at(bn, oy, ox);
        for (int co = 0; co < CO; ++co) d_b[co] += g[co];
        for (int ky = ky0; ky < ky1; ++ky) {
          const int iy = oy * s + ky - pt;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * s + kx - pl;
            if (ix < 0 || ix >= in.w) continue;
            const float* xrow = in.at(bn, iy, ix);
            float* gw = &d_w[(size_t(ky) * KW + kx) * CI * CO];
            for (int ci = 0; ci < CI; ++ci) {
              const float a = xrow[ci];
              float* gwr = gw + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co) gwr[co] += a * g[co];
            }
          }
        }
      };
      int ox = 0;
      for (; ox < xi0; ++ox) edge_col(ox);
      for (; ox + 3 <= xi1; ox += 4) {
        std::memcpy(gbuf, d_out.at(bn, oy, ox), sizeof(float) * 4 * CO);
        const float* g0 = gbuf;
        const float* g1 = gbuf + CO;
        const float* g2 = gbuf + 2 * CO;
        const float* g3 = gbuf + 3 * CO;
        for (int co = 0; co < CO; ++co) d_b[co] += g0[co] + g1[co] + g2[co] + g3[co];
        for (int ky = ky0; ky < ky1; ++ky) {
          const int iy = oy * s + ky - pt;
          const float* base = in.at(bn, iy, ox * s - pl);
          for (int kx = 0; kx < KW; ++kx) {
            const float* x0 = base + size_t(kx) * CI;
            const size_t step = size_t(s) * CI;
            float* gw = &d_w[(size_t(ky) * KW + kx) * CI * CO];
            for (int ci = 0; ci < CI; ++ci) {
              const float a0 = x0[ci];
              const float a1 = x0[step + ci];
              const float a2 = x0[2 * step + ci];
              const float a3 = x0[3 * step + ci];
              float* gwr = gw + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co)
                gwr[co] += a0 * g0[co] + a1 * g1[co] + a2 * g2[co] + a3 * g3[co];
            }
          }
        }
      }
      for (; ox < ow; ++ox) edge_col(ox);
    }
}

// Restructured per weight tap: each (ky, kx) slice accumulates an outer
// product over its valid input grid, in the same (iy, ix) order as the
// scatter formulation, so gradients stay bit-identical to the reference.
inline void deconv2d_backward_params(const Tensor& in, const ConvParams& p, const Tensor& d_out,
                                     std::vector<float>& d_w, std::vector<float>& d_b) {
  require(d_w.size() == p.weight_count() && d_b.size() == size_t(p.cout),
          "deconv2d_backward_params: gradient buffer shape mismatch");
  const int s = p.stride, KH = p.kh, KW = p.kw, CI = p.cin, CO = p.cout;
  const int oh = d_out.h, ow = d_out.w;
  const int crop = (KH - s) / 2;
  for (int bn = 0; bn < in.n; ++bn) {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const float* g = d_out.at(bn, oy, ox);
        for (int co = 0; co < CO; ++co) d_b[co] += g[co];
      }
    for (int ky = 0; ky < KH; ++ky) {
      const int iy_lo = std::max(0, (crop - ky + s - 1) / s);
      const int iy_hi = std::min(in.h - 1, (oh - 1 + crop - ky) / s);
      for (int kx = 0; kx < KW; ++kx) {
        const int ix_lo = std::max(0, (crop - kx + s - 1) / s);
        const int ix_hi = std::min(in.w - 1, (ow - 1 + crop - kx) / s);
        float* gw = &d_w[(size_t(ky) * KW + kx) * CI * CO];
        for (int iy = iy_lo; iy <= iy_hi; ++iy) {
          const int oy = iy * s - crop + ky;
          const float* xrow = in.at(bn, iy, ix_lo);
          const float* grow = d_out.at(bn, oy, ix_lo * s - crop + kx);
          for (int ix = ix_lo; ix <= ix_hi; ++ix) {
            for (int ci = 0; ci < CI; ++ci) {
              const float a = xrow[ci];
              float* gwr = gw + size_t(ci) * CO;
              for (int co = 0; co < CO; ++co) gwr[co] += a * grow[co];
            }
            xrow += CI;
            grow += size_t(s) * CO;
          }
        }
      }
    }
  }
}

inline void relu_inplace(Tensor& t) {
  for (float& x : t.v) x = x > 0.f ? x : 0.f;
}

// mask comes from the post-activation tensor: gradient passes where y > 0
inline void relu_backward_inplace(const Tensor& post, Tensor& d) {
  require(post.same_shape(d), "relu_backward: shape mismatch");
  for (size_t i = 0; i < d.v.size(); ++i)
    if (post.v[i] <= 0.f) d.v[i] = 0.f;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "add: shape mismatch");
  for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

}  // namespace edgeflow
