// Multi-scale encoder-decoder flow network with incremental per-level
// predictions.
//
// Topology (L = 3): three stride-2 encoder stages (stem + two downsampling
// stages with normalization-free residual blocks), mirrored by three
// transposed convs with additive encoder skips; a 1x1 head at each decoder
// level emits the flow increment (plus one uncertainty channel when
// enabled). The accumulated estimate follows est_l = resize(est_{l-1}) +
// delta_l with flow-value scaling, base case est_1 = delta_1; uncertainty
// accumulates the same way without value scaling.
//
// Modes: multiscale / multiscale_uncertainty drive all three heads; raw and
// shift50 keep only the full-resolution head (shift50 adds a constant +50
// inside the graph so the emitted tensor lives in a positive range, and the
// flow readout subtracts it).
#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "edgeflow/core.hpp"
#include "edgeflow/resize.hpp"
#include "edgeflow/tensor.hpp"

namespace edgeflow {

enum class NetMode { raw, shift50, multiscale, multiscale_uncertainty };

inline std::string to_string(NetMode m) {
  switch (m) {
    case NetMode::raw: return "raw";
    case NetMode::shift50: return "shift50";
    case NetMode::multiscale: return "multiscale";
    case NetMode::multiscale_uncertainty: return "multiscale_uncertainty";
  }
  return "?";
}

inline NetMode net_mode_from_string(const std::string& s) {
  if (s == "raw" || s == "l1") return NetMode::raw;
  if (s == "shift50" || s == "l1_shift50") return NetMode::shift50;
  if (s == "multiscale") return NetMode::multiscale;
  if (s == "multiscale_uncertainty") return NetMode::multiscale_uncertainty;
  throw argument_error("unknown net mode '" + s + "'");
}

struct NetConfig {
  int levels = 3;
  int base_channels = 16;      // stage widths: c, 2c, 3c
  int blocks_per_stage = 2;
  bool uncertainty_head = true;
  NetMode output_mode = NetMode::multiscale_uncertainty;
  int in_channels = 2;         // stacked pair: 2 grayscale, 6 RGB
  float shift = 0.f;
  int ref_h = 96, ref_w = 128; // dims for analytic flop counts

  int stride_product() const { return 8; }
  bool multiscale() const {
    return output_mode == NetMode::multiscale || output_mode == NetMode::multiscale_uncertainty;
  }
  int head_channels() const { return uncertainty_head ? 3 : 2; }
};

inline void validate_config(const NetConfig& cfg) {
  require(cfg.levels == 3, "NetConfig: this architecture realizes exactly 3 levels");
  require(cfg.base_channels >= 4 && 3 * cfg.base_channels <= kMaxChannels,
          "NetConfig: base_channels out of supported range");
  require(cfg.blocks_per_stage >= 1 && cfg.blocks_per_stage <= 8,
          "NetConfig: blocks_per_stage out of range");
  require(cfg.in_channels == 2 || cfg.in_channels == 6,
          "NetConfig: in_channels must be 2 or 6");
  require(cfg.uncertainty_head == (cfg.output_mode == NetMode::multiscale_uncertainty),
          "NetConfig: uncertainty_head must match output mode");
  if (cfg.output_mode == NetMode::shift50)
    require(cfg.shift != 0.f, "NetConfig: shift50 mode needs a nonzero shift");
  else
    require(cfg.shift == 0.f, "NetConfig: shift is only meaningful in shift50 mode");
}

inline NetConfig desk_config(NetMode mode = NetMode::multiscale_uncertainty) {
  NetConfig cfg;
  cfg.output_mode = mode;
  cfg.uncertainty_head = mode == NetMode::multiscale_uncertainty;
  if (mode == NetMode::shift50) cfg.shift = 50.f;
  return cfg;
}

// Sized to land within 10% of the 2.0M-parameter reference budget at RGB
// input; not exercised by routine tests beyond the count itself.
inline NetConfig full_scale_config() {
  NetConfig cfg = desk_config();
  cfg.base_channels = 53;
  cfg.in_channels = 6;
  cfg.ref_h = 240;
  cfg.ref_w = 176;
  return cfg;
}

struct Weights {
  NetConfig cfg;
  std::vector<std::string> names;
  std::vector<ConvParams> layers;

  int index(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return int(i);
    throw argument_error("Weights: no layer named '" + name + "'");
  }
  const ConvParams& layer(const std::string& name) const { return layers[index(name)]; }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += int64_t(l.param_count());
    return n;
  }
};

struct Gradients {
  std::vector<std::vector<float>> w, b;

  static Gradients zeros_like(const Weights& ws) {
    Gradients g;
    g.w.reserve(ws.layers.size());
    g.b.reserve(ws.layers.size());
    for (const auto& l : ws.layers) {
      g.w.emplace_back(l.weight_count(), 0.f);
      g.b.emplace_back(l.cout, 0.f);
    }
    return g;
  }
  void zero() {
    for (auto& v : w) std::fill(v.begin(), v.end(), 0.f);
    for (auto& v : b) std::fill(v.begin(), v.end(), 0.f);
  }
};

namespace detail {

struct LayerDef {
  std::string name;
  int k, cin, cout, stride;
  bool transposed;
};

inline std::vector<LayerDef> layer_plan(const NetConfig& cfg) {
  const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 3 * c1;
  const int hc = cfg.head_channels();
  std::vector<LayerDef> plan;
  plan.push_back({"stem", 3, cfg.in_channels, c1, 2, false});
  plan.push_back({"down2", 3, c1, c2, 2, false});
  for (int b = 0; b < cfg.blocks_per_stage; ++b) {
    plan.push_back({"enc2_b" + std::to_string(b) + "_a", 3, c2, c2, 1, false});
    plan.push_back({"enc2_b" + std::to_string(b) + "_b", 3, c2, c2, 1, false});
  }
  plan.push_back({"down3", 3, c2, c3, 2, false});
  for (int b = 0; b < cfg.blocks_per_stage; ++b) {
    plan.push_back({"enc3_b" + std::to_string(b) + "_a", 3, c3, c3, 1, false});
    plan.push_back({"enc3_b" + std::to_string(b) + "_b", 3, c3, c3, 1, false});
  }
  plan.push_back({"up2", 4, c3, c2, 2, true});
  plan.push_back({"fuse2", 3, c2, c2, 1, false});
  if (cfg.multiscale()) plan.push_back({"head1", 1, c2, hc, 1, false});
  plan.push_back({"up1", 4, c2, c1, 2, true});
  plan.push_back({"fuse1", 3, c1, c1, 1, false});
  if (cfg.multiscale()) plan.push_back({"head2", 1, c1, hc, 1, false});
  plan.push_back({"up0", 2, c1, c1, 2, true});
  plan.push_back({"head3", 1, c1, cfg.multiscale() ? hc : 2, 1, false});
  return plan;
}

}  // namespace detail

inline Weights init_weights(const NetConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  Weights ws;
  ws.cfg = cfg;
  const auto plan = detail::layer_plan(cfg);
  for (size_t i = 0; i < plan.size(); ++i) {
    const auto& d = plan[i];
    ConvParams p;
    p.kh = p.kw = d.k;
    p.cin = d.cin;
    p.cout = d.cout;
    p.stride = d.stride;
    p.transposed = d.transposed;
    p.alloc();
    const bool zero_head =
        cfg.multiscale() && (d.name == "head2" || d.name == "head3");  // levels >= 2
    if (!zero_head) {
      Rng rng(Rng::derive(seed, uint64_t(i)));
      const float std = std::sqrt(2.0f / float(d.k * d.k * d.cin));
      for (auto& x : p.w) x = std * float(rng.normal());
    }
    ws.names.push_back(d.name);
    ws.layers.push_back(std::move(p));
  }
  return ws;
}

struct PyramidOutput {
  std::vector<Tensor> delta;  // per level, coarse to fine, N x hl x wl x 2
  std::vector<Tensor> dunc;   // per level, N x hl x wl x 1; empty without uncertainty head
  std::vector<Tensor> est;    // accumulated flow per level
  std::vector<Tensor> unc;    // accumulated uncertainty per level
  float shift = 0.f;          // readout offset baked into the finest tensors

  int levels() const { return int(delta.size()); }

  FlowField flow(int batch = 0) const {
    const Tensor& t = est.back();
    require(batch >= 0 && batch < t.n, "PyramidOutput::flow: batch index out of range");
    FlowField f(t.h, t.w);
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) {
        const float* p = t.at(batch, y, x);
        f.u(y, x) = p[0] - shift;
        f.v(y, x) = p[1] - shift;
      }
    return f;
  }

  UncertaintyField uncertainty(int batch = 0) const {
    require(!unc.empty(), "PyramidOutput::uncertainty: no uncertainty head");
    const Tensor& t = unc.back();
    require(batch >= 0 && batch < t.n, "PyramidOutput::uncertainty: batch index out of range");
    UncertaintyField f(t.h, t.w);
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) f.at(y, x) = t.at(batch, y, x)[0];
    return f;
  }
};

// ---------------------------------------------------------------------------
// Pyramid accumulation (the Eq.-style recurrence). Flow channels are resized
// with value scaling (u by width ratio, v by height ratio); the uncertainty
// channel is resized plainly.

namespace detail {

inline Tensor resize_tensor(const Tensor& in, int oh, int ow, bool flow_scaled) {
  Tensor out(in.n, oh, ow, in.c);
  const size_t in_stride = size_t(in.h) * in.w * in.c;
  const size_t out_stride = size_t(oh) * ow * in.c;
  for (int bn = 0; bn < in.n; ++bn)
    resize_plane(in.v.data() + bn * in_stride, in.h, in.w, in.c, out.v.data() + bn * out_stride,
                 oh, ow);
  if (flow_scaled) {
    require(in.c == 2, "resize_tensor: flow scaling expects 2 channels");
    const float su = float(ow) / float(in.w), sv = float(oh) / float(in.h);
    for (size_t i = 0; i < out.v.size(); i += 2) {
      out.v[i] *= su;
      out.v[i + 1] *= sv;
    }
  }
  return out;
}

// adjoint of resize_tensor
inline Tensor resize_tensor_backward(const Tensor& d_out, int ih, int iw, bool flow_scaled) {
  Tensor d = d_out;
  if (flow_scaled) {
    const float su = float(d_out.w) / float(iw), sv = float(d_out.h) / float(ih);
    for (size_t i = 0; i < d.v.size(); i += 2) {
      d.v[i] *= su;
      d.v[i + 1] *= sv;
    }
  }
  Tensor d_in(d.n, ih, iw, d.c);
  const size_t in_stride = size_t(ih) * iw * d.c;
  const size_t out_stride = size_t(d.h) * d.w * d.c;
  for (int bn = 0; bn < d.n; ++bn)
    resize_plane_backward(d.v.data() + bn * out_stride, d.h, d.w, d.c,
                          d_in.v.data() + bn * in_stride, ih, iw);
  return d_in;
}

}  // namespace detail

inline void check_pyramid_dims(const std::vector<Tensor>& deltas) {
  require(!deltas.empty(), "accumulate_pyramid: empty delta list");
  for (size_t l = 1; l < deltas.size(); ++l) {
    const Tensor& a = deltas[l - 1];
    const Tensor& b = deltas[l];
    require(b.h == 2 * a.h && b.w == 2 * a.w && b.n == a.n,
            "accumulate_pyramid: level " + std::to_string(l + 1) + " dims " +
                std::to_string(b.h) + "x" + std::to_string(b.w) +
                " are not 2x the previous level");
  }
}

inline std::vector<Tensor> accumulate_levels(const std::vector<Tensor>& deltas,
                                             bool flow_scaled) {
  check_pyramid_dims(deltas);
  std::vector<Tensor> est;
  est.reserve(deltas.size());
  est.push_back(deltas[0]);
  for (size_t l = 1; l < deltas.size(); ++l) {
    Tensor up = detail::resize_tensor(est.back(), deltas[l].h, deltas[l].w, flow_scaled);
    add_inplace(up, deltas[l]);
    est.push_back(std::move(up));
  }
  return est;
}

inline void accumulate_into(PyramidOutput& py) {
  py.est = accumulate_levels(py.delta, /*flow_scaled=*/true);
  if (!py.dunc.empty()) py.unc = accumulate_levels(py.dunc, /*flow_scaled=*/false);
}

// Single-sample convenience matching the operation contract.
inline std::pair<FlowField, UncertaintyField> accumulate_pyramid(
    const std::vector<Tensor>& flow_deltas, const std::vector<Tensor>& unc_deltas = {}) {
  PyramidOutput py;
  py.delta = flow_deltas;
  py.dunc = unc_deltas;
  accumulate_into(py);
  UncertaintyField uf(1, 1);
  if (!py.unc.empty()) uf = py.uncertainty(0);
  return {py.flow(0), uf};
}

// ---------------------------------------------------------------------------
// Forward pass. The trace keeps every tensor backward needs.

struct ForwardTrace {
  Tensor input;
  Tensor stem_out, down2_out, down3_out;              // post-relu
  std::vector<Tensor> enc2_a, enc2_y, enc3_a, enc3_y; // per block, post-relu
  Tensor dec2, fuse2_out, dec1, fuse1_out, dec0;      // post-relu
  PyramidOutput py;
};

namespace detail {

inline Tensor res_stage(const std::vector<ConvParams>& layers, int first, int blocks,
                        const Tensor& in, std::vector<Tensor>& trace_a,
                        std::vector<Tensor>& trace_y) {
  Tensor x = in;
  for (int b = 0; b < blocks; ++b) {
    Tensor t = conv2d(x, layers[first + 2 * b]);
    relu_inplace(t);
    Tensor u = conv2d(t, layers[first + 2 * b + 1]);
    add_inplace(u, x);
    relu_inplace(u);
    trace_a.push_back(std::move(t));
    x = std::move(u);
    trace_y.push_back(x);
  }
  return x;
}

inline void split_head(const Tensor& h, float shift, bool with_unc, Tensor& delta, Tensor& dunc) {
  delta = Tensor(h.n, h.h, h.w, 2);
  if (with_unc) dunc = Tensor(h.n, h.h, h.w, 1);
  const int hw = h.h * h.w;
  for (int bn = 0; bn < h.n; ++bn)
    for (int i = 0; i < hw; ++i) {
      const float* src = &h.v[(size_t(bn) * hw + i) * h.c];
      float* d = &delta.v[(size_t(bn) * hw + i) * 2];
      d[0] = src[0] + shift;
      d[1] = src[1] + shift;
      if (with_unc) dunc.v[size_t(bn) * hw + i] = src[2];
    }
}

}  // namespace detail

inline ForwardTrace forward_trace(const Tensor& input, const Weights& ws) {
  const NetConfig& cfg = ws.cfg;
  validate_config(cfg);
  require(input.c == cfg.in_channels, "forward: input channels " + std::to_string(input.c) +
                                          " != configured " + std::to_string(cfg.in_channels));
  require(input.h % cfg.stride_product() == 0,
          "forward: height " + std::to_string(input.h) + " not divisible by 8");
  require(input.w % cfg.stride_product() == 0,
          "forward: width " + std::to_string(input.w) + " not divisible by 8");

  const int B = cfg.blocks_per_stage;
  ForwardTrace tr;
  tr.input = input;

  int li = 0;
  auto next = [&](const char* name) -> const ConvParams& {
    require(ws.names[li] == name, "forward: weight order mismatch at " + ws.names[li]);
    return ws.layers[li++];
  };

  tr.stem_out = conv2d(input, next("stem"));
  relu_inplace(tr.stem_out);
  tr.down2_out = conv2d(tr.stem_out, next("down2"));
  relu_inplace(tr.down2_out);
  li += 2 * B;
  Tensor e2 = detail::res_stage(ws.layers, ws.index("enc2_b0_a"), B, tr.down2_out, tr.enc2_a,
                                tr.enc2_y);
  tr.down3_out = conv2d(e2, next("down3"));
  relu_inplace(tr.down3_out);
  li += 2 * B;
  Tensor e3 = detail::res_stage(ws.layers, ws.index("enc3_b0_a"), B, tr.down3_out, tr.enc3_a,
                                tr.enc3_y);

  tr.dec2 = deconv2d(e3, next("up2"));
  add_inplace(tr.dec2, e2);
  relu_inplace(tr.dec2);
  tr.fuse2_out = conv2d(tr.dec2, next("fuse2"));
  relu_inplace(tr.fuse2_out);

  PyramidOutput& py = tr.py;
  const bool msu = cfg.output_mode == NetMode::multiscale_uncertainty;
  if (cfg.multiscale()) {
    Tensor h1 = conv2d(tr.fuse2_out, next("head1"));
    Tensor d, u;
    detail::split_head(h1, 0.f, msu, d, u);
    py.delta.push_back(std::move(d));
    if (msu) py.dunc.push_back(std::move(u));
  }

  tr.dec1 = deconv2d(tr.fuse2_out, next("up1"));
  add_inplace(tr.dec1, tr.stem_out);
  relu_inplace(tr.dec1);
  tr.fuse1_out = conv2d(tr.dec1, next("fuse1"));
  relu_inplace(tr.fuse1_out);

  if (cfg.multiscale()) {
    Tensor h2 = conv2d(tr.fuse1_out, next("head2"));
    Tensor d, u;
    detail::split_head(h2, 0.f, msu, d, u);
    py.delta.push_back(std::move(d));
    if (msu) py.dunc.push_back(std::move(u));
  }

  tr.dec0 = deconv2d(tr.fuse1_out, next("up0"));
  relu_inplace(tr.dec0);
  Tensor h3 = conv2d(tr.dec0, next("head3"));
  {
    Tensor d, u;
    detail::split_head(h3, cfg.shift, msu, d, u);
    py.delta.push_back(std::move(d));
    if (msu) py.dunc.push_back(std::move(u));
  }

  py.shift = cfg.shift;
  accumulate_into(py);
  for (const Tensor* t : {&py.est.back(), py.unc.empty() ? &py.est.back() : &py.unc.back()})
    if (!all_finite(t->v)) throw numeric_error("forward: non-finite network output");
  return tr;
}

inline PyramidOutput forward(const Tensor& input, const Weights& ws) {
  return forward_trace(input, ws).py;
}

inline Tensor pair_to_tensor(const ImagePair& pair) {
  Tensor t(1, pair.height, pair.width, 2 * pair.channels);
  std::copy(pair.stacked.begin(), pair.stacked.end(), t.v.begin());
  return t;
}

inline PyramidOutput forward(const ImagePair& pair, const Weights& ws) {
  return forward(pair_to_tensor(pair), ws);
}

// ---------------------------------------------------------------------------
// Backward pass: gradients of a scalar loss w.r.t. all parameters, given the
// loss gradients on the per-level accumulated estimates (and accumulated
// uncertainties when present). Gradient tensors may be empty (treated as 0).

// Adjoint of accumulate_into: gradients on accumulated (est, unc) pulled back
// to the raw per-level deltas. Empty entries in d_est/d_unc are treated as 0.
inline void accumulate_backward(const PyramidOutput& py, const std::vector<Tensor>& d_est,
                                const std::vector<Tensor>& d_unc, std::vector<Tensor>& d_delta,
                                std::vector<Tensor>& d_dunc) {
  const int L = py.levels();
  require(int(d_est.size()) == L, "backward: d_est level count mismatch");
  require(d_unc.empty() || int(d_unc.size()) == L, "backward: d_unc level count mismatch");
  d_delta.assign(L, Tensor());
  d_dunc.assign(L, Tensor());
  Tensor carry;  // d w.r.t. est[l] accumulated from finer levels
  for (int l = L - 1; l >= 0; --l) {
    Tensor d = d_est[l];
    if (carry.size() > 0) {
      if (d.size() == 0) d = Tensor(carry.n, py.est[l].h, py.est[l].w, 2);
      add_inplace(d, carry);
    }
    require(d.size() > 0, "backward: missing d_est at level " + std::to_string(l + 1));
    d_delta[l] = d;
    if (l > 0)
      carry = detail::resize_tensor_backward(d, py.est[l - 1].h, py.est[l - 1].w, true);
  }
  if (!d_unc.empty() && !py.unc.empty()) {
    Tensor ucarry;
    for (int l = L - 1; l >= 0; --l) {
      Tensor d = d_unc[l];
      if (ucarry.size() > 0) {
        if (d.size() == 0) d = Tensor(ucarry.n, py.unc[l].h, py.unc[l].w, 1);
        add_inplace(d, ucarry);
      }
      require(d.size() > 0, "backward: missing d_unc at level " + std::to_string(l + 1));
      d_dunc[l] = d;
      if (l > 0)
        ucarry = detail::resize_tensor_backward(d, py.unc[l - 1].h, py.unc[l - 1].w, false);
    }
  }
}

inline void backward(const ForwardTrace& tr, const Weights& ws,
                     const std::vector<Tensor>& d_est, const std::vector<Tensor>& d_unc,
                     Gradients& g) {
  const NetConfig& cfg = ws.cfg;
  const int B = cfg.blocks_per_stage;
  const int L = tr.py.levels();
  std::vector<Tensor> d_delta, d_dunc;
  accumulate_backward(tr.py, d_est, d_unc, d_delta, d_dunc);

  auto merge_head_grad = [&](int l, int hc) {
    // interleave d_delta (+ d_dunc) back into head-output channel layout
    const Tensor& dd = d_delta[l];
    Tensor dh(dd.n, dd.h, dd.w, hc);
    const int hw = dd.h * dd.w;
    for (int bn = 0; bn < dd.n; ++bn)
      for (int i = 0; i < hw; ++i) {
        float* dst = &dh.v[(size_t(bn) * hw + i) * hc];
        const float* s = &dd.v[(size_t(bn) * hw + i) * 2];
        dst[0] = s[0];
        dst[1] = s[1];
        if (hc == 3) dst[2] = d_dunc[l].size() ? d_dunc[l].v[size_t(bn) * hw + i] : 0.f;
      }
    return dh;
  };

  auto conv_back = [&](const char* name, const Tensor& in, const Tensor& d_out,
                       bool want_d_in) -> Tensor {
    const int i = ws.index(name);
    const ConvParams& p = ws.layers[i];
    if (p.transposed)
      deconv2d_backward_params(in, p, d_out, g.w[i], g.b[i]);
    else
      conv2d_backward_params(in, p, d_out, g.w[i], g.b[i]);
    if (!want_d_in) return Tensor();
    return p.transposed ? deconv2d_backward_input(p, d_out)
                        : conv2d_backward_input(p, d_out, in.h, in.w);
  };

  auto res_stage_back = [&](const char* stage, const Tensor& stage_in,
                            const std::vector<Tensor>& as, const std::vector<Tensor>& ys,
                            Tensor d_y) -> Tensor {
    for (int b = B - 1; b >= 0; --b) {
      const Tensor& x = b == 0 ? stage_in : ys[b - 1];
      const std::string an = std::string(stage) + "_b" + std::to_string(b) + "_a";
      const std::string bn = std::string(stage) + "_b" + std::to_string(b) + "_b";
      relu_backward_inplace(ys[b], d_y);
      Tensor d_t = conv_back(bn.c_str(), as[b], d_y, true);
      relu_backward_inplace(as[b], d_t);
      Tensor d_x = conv_back(an.c_str(), x, d_t, true);
      add_inplace(d_x, d_y);  // skip branch
      d_y = std::move(d_x);
    }
    return d_y;
  };

  const bool ms = cfg.multiscale();
  const Tensor& e2 = tr.enc2_y[B - 1];
  const Tensor& e3 = tr.enc3_y[B - 1];

  // fine level: head3 <- dec0 <- up0 <- fuse1_out
  Tensor d_dec0 = conv_back("head3", tr.dec0, merge_head_grad(L - 1, ws.layer("head3").cout),
                            true);
  relu_backward_inplace(tr.dec0, d_dec0);
  Tensor d_fuse1 = conv_back("up0", tr.fuse1_out, d_dec0, true);
  if (ms) add_inplace(d_fuse1, conv_back("head2", tr.fuse1_out, merge_head_grad(1, cfg.head_channels()), true));
  relu_backward_inplace(tr.fuse1_out, d_fuse1);
  Tensor d_dec1 = conv_back("fuse1", tr.dec1, d_fuse1, true);
  relu_backward_inplace(tr.dec1, d_dec1);
  Tensor d_stem = d_dec1;  // additive skip from stem_out

  Tensor d_fuse2 = conv_back("up1", tr.fuse2_out, d_dec1, true);
  if (ms) add_inplace(d_fuse2, conv_back("head1", tr.fuse2_out, merge_head_grad(0, cfg.head_channels()), true));
  relu_backward_inplace(tr.fuse2_out, d_fuse2);
  Tensor d_dec2 = conv_back("fuse2", tr.dec2, d_fuse2, true);
  relu_backward_inplace(tr.dec2, d_dec2);
  Tensor d_e2 = d_dec2;  // additive skip from e2

  Tensor d_e3 = conv_back("up2", e3, d_dec2, true);
  Tensor d_down3 = res_stage_back("enc3", tr.down3_out, tr.enc3_a, tr.enc3_y, std::move(d_e3));
  relu_backward_inplace(tr.down3_out, d_down3);
  add_inplace(d_e2, conv_back("down3", e2, d_down3, true));
  Tensor d_down2 = res_stage_back("enc2", tr.down2_out, tr.enc2_a, tr.enc2_y, std::move(d_e2));
  relu_backward_inplace(tr.down2_out, d_down2);
  add_inplace(d_stem, conv_back("down2", tr.stem_out, d_down2, true));
  relu_backward_inplace(tr.stem_out, d_stem);
  conv_back("stem", tr.input, d_stem, false);
}

// ---------------------------------------------------------------------------
// Analytic cost model: MACs * 2, convolutions only (biases and elementwise
// ops excluded by convention).

struct FlopsParams {
  double flops = 0;
  int64_t params = 0;
};

inline FlopsParams flops_and_params(const NetConfig& cfg) {
  validate_config(cfg);
  const int H = cfg.ref_h, W = cfg.ref_w;
  require(H % 8 == 0 && W % 8 == 0, "flops_and_params: ref dims not divisible by 8");
  FlopsParams fp;
  // spatial dims per layer mirror the forward wiring
  std::map<std::string, int64_t> pos;
  const int64_t p1 = int64_t(H / 2) * (W / 2), p2 = int64_t(H / 4) * (W / 4),
                p3 = int64_t(H / 8) * (W / 8), p0 = int64_t(H) * W;
  for (const auto& d : detail::layer_plan(cfg)) {
    int64_t positions;
    if (d.name == "stem") positions = p1;
    else if (d.name == "down2") positions = p2;
    else if (d.name.rfind("enc2", 0) == 0) positions = p2;
    else if (d.name == "down3") positions = p3;
    else if (d.name.rfind("enc3", 0) == 0) positions = p3;
    else if (d.name == "up2") positions = p3;       // transposed: input positions
    else if (d.name == "fuse2" || d.name == "head1") positions = p2;
    else if (d.name == "up1") positions = p2;
    else if (d.name == "fuse1" || d.name == "head2") positions = p1;
    else if (d.name == "up0") positions = p1;
    else if (d.name == "head3") positions = p0;
    else throw spec_error("flops_and_params: unplanned layer " + d.name);
    fp.flops += 2.0 * double(positions) * d.k * d.k * d.cin * d.cout;
    fp.params += int64_t(d.k) * d.k * d.cin * d.cout + d.cout;
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: single-file archive of named arrays + config echo.

namespace detail {

inline void put_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline int32_t get_i32(std::istream& is) {
  int32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw format_error("checkpoint: truncated file");
  return v;
}
inline uint64_t get_u64(std::istream& is) {
  uint64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw format_error("checkpoint: truncated file");
  return v;
}
inline float get_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw format_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_weights(const Weights& ws, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("save_weights: cannot open " + path);
  os.write("EFNW", 4);
  detail::put_i32(os, 1);  // version
  const NetConfig& c = ws.cfg;
  detail::put_i32(os, c.levels);
  detail::put_i32(os, c.base_channels);
  detail::put_i32(os, c.blocks_per_stage);
  detail::put_i32(os, c.uncertainty_head ? 1 : 0);
  detail::put_i32(os, int32_t(c.output_mode));
  detail::put_i32(os, c.in_channels);
  detail::put_f32(os, c.shift);
  detail::put_i32(os, c.ref_h);
  detail::put_i32(os, c.ref_w);
  detail::put_i32(os, int32_t(ws.layers.size()));
  for (size_t i = 0; i < ws.layers.size(); ++i) {
    const auto& name = ws.names[i];
    const auto& l = ws.layers[i];
    detail::put_i32(os, int32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_i32(os, l.kh);
    detail::put_i32(os, l.kw);
    detail::put_i32(os, l.cin);
    detail::put_i32(os, l.cout);
    detail::put_i32(os, l.stride);
    detail::put_i32(os, l.transposed ? 1 : 0);
    detail::put_u64(os, l.w.size());
    os.write(reinterpret_cast<const char*>(l.w.data()), std::streamsize(l.w.size() * 4));
    detail::put_u64(os, l.b.size());
    os.write(reinterpret_cast<const char*>(l.b.data()), std::streamsize(l.b.size() * 4));
  }
  if (!os) throw io_error("save_weights: write failed for " + path);
}

inline Weights load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("load_weights: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EFNW", 4) != 0)
    throw format_error("load_weights: bad magic in " + path);
  const int32_t version = detail::get_i32(is);
  if (version != 1)
    throw format_error("load_weights: unsupported version " + std::to_string(version));
  Weights ws;
  NetConfig& c = ws.cfg;
  c.levels = detail::get_i32(is);
  c.base_channels = detail::get_i32(is);
  c.blocks_per_stage = detail::get_i32(is);
  c.uncertainty_head = detail::get_i32(is) != 0;
  c.output_mode = NetMode(detail::get_i32(is));
  c.in_channels = detail::get_i32(is);
  c.shift = detail::get_f32(is);
  c.ref_h = detail::get_i32(is);
  c.ref_w = detail::get_i32(is);
  validate_config(c);
  const int32_t n_layers = detail::get_i32(is);
  const auto plan = detail::layer_plan(c);
  require(size_t(n_layers) == plan.size(), "load_weights: layer count mismatch vs config");
  for (int32_t i = 0; i < n_layers; ++i) {
    const int32_t name_len = detail::get_i32(is);
    if (name_len <= 0 || name_len > 256) throw format_error("load_weights: bad layer name length");
    std::string name(size_t(name_len), '\0');
    is.read(name.data(), name_len);
    ConvParams l;
    l.kh = detail::get_i32(is);
    l.kw = detail::get_i32(is);
    l.cin = detail::get_i32(is);
    l.cout = detail::get_i32(is);
    l.stride = detail::get_i32(is);
    l.transposed = detail::get_i32(is) != 0;
    const uint64_t wn = detail::get_u64(is);
    if (wn != l.weight_count()) throw format_error("load_weights: weight size mismatch at " + name);
    l.w.resize(wn);
    is.read(reinterpret_cast<char*>(l.w.data()), std::streamsize(wn * 4));
    const uint64_t bn = detail::get_u64(is);
    if (bn != uint64_t(l.cout)) throw format_error("load_weights: bias size mismatch at " + name);
    l.b.resize(bn);
    is.read(reinterpret_cast<char*>(l.b.data()), std::streamsize(bn * 4));
    if (!is) throw format_error("load_weights: truncated file at " + name);
    if (name != plan[i].name) throw format_error("load_weights: layer order mismatch at " + name);
    if (!all_finite(l.w) || !all_finite(l.b))
      throw numeric_error("load_weights: non-finite values at " + name);
    ws.names.push_back(std::move(name));
    ws.layers.push_back(std::move(l));
  }
  return ws;
}

}  // namespace edgeflow
