#pragma once

// Multi-scale training losses over the accumulated flow pyramid, with the
// self-supervised uncertainty weighting, plus the ablation variants and a
// finite-difference gradient checker for the loss itself.

#include <cmath>
#include <cstdint>
#include <vector>

#include "edgeflow/net.hpp"

namespace edgeflow {

struct LossConfig {
  float epsilon = 1e-3f;  // inside the softplus argument of the divisor only
  NetMode mode = NetMode::multiscale_uncertainty;
  std::vector<float> level_weights;  // empty means all 1
  float shift = 50.f;                // target offset in shift50 mode
};

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline void validate_loss_config(const LossConfig& cfg) {
  require(cfg.epsilon > 0.f, "loss: epsilon must be positive");
}

// Ground truth resized (flow-value-scaled) to every pyramid level resolution.
inline std::vector<Tensor> gt_pyramid(const Tensor& gt, const PyramidOutput& py) {
  require(gt.c == 2, "loss: ground truth must have 2 channels");
  require(!py.est.empty(), "loss: empty pyramid");
  require(gt.n == py.est.back().n && gt.h == py.est.back().h && gt.w == py.est.back().w,
          "loss: ground truth resolution must match the finest level");
  std::vector<Tensor> out;
  out.reserve(py.est.size());
  for (const Tensor& e : py.est)
    out.push_back(e.h == gt.h && e.w == gt.w ? gt : detail::resize_tensor(gt, e.h, e.w, true));
  return out;
}

// One evaluator for all four modes. Gradient outputs are optional; when
// requested they are sized per level (empty tensors at unsupervised levels).
inline double loss_value_and_grad(const PyramidOutput& py, const Tensor& gt,
                                  const LossConfig& cfg, std::vector<Tensor>* d_est,
                                  std::vector<Tensor>* d_unc) {
  validate_loss_config(cfg);
  const int L = py.levels();
  require(L > 0, "loss: empty pyramid");
  const bool multi = cfg.mode == NetMode::multiscale || cfg.mode == NetMode::multiscale_uncertainty;
  const bool with_unc = cfg.mode == NetMode::multiscale_uncertainty;
  require(!with_unc || int(py.unc.size()) == L, "loss: uncertainty levels missing");
  require(cfg.level_weights.empty() || int(cfg.level_weights.size()) == L,
          "loss: level weight count mismatch");
  require(all_finite(gt.v), "loss: non-finite ground truth");

  const std::vector<Tensor> gts = gt_pyramid(gt, py);
  if (d_est) d_est->assign(L, Tensor());
  if (d_unc) d_unc->assign(L, Tensor());

  const float target_shift = cfg.mode == NetMode::shift50 ? cfg.shift : 0.f;
  const int first = multi ? 0 : L - 1;
  double total = 0;
  for (int l = first; l < L; ++l) {
    const Tensor& e = py.est[l];
    require(all_finite(e.v), "loss: non-finite prediction at level " + std::to_string(l + 1));
    const double wl = cfg.level_weights.empty() ? 1.0 : cfg.level_weights[l];
    const size_t px = size_t(e.n) * e.h * e.w;
    const double inv = wl / double(px);
    Tensor* de = d_est ? &(*d_est)[l] : nullptr;
    Tensor* du = nullptr;
    if (de) *de = Tensor(e.n, e.h, e.w, 2);
    if (with_unc && d_unc) {
      (*d_unc)[l] = Tensor(e.n, e.h, e.w, 1);
      du = &(*d_unc)[l];
    }
    const Tensor* unc = with_unc ? &py.unc[l] : nullptr;
    if (unc) require(all_finite(unc->v), "loss: non-finite uncertainty");
    double lvl = 0;
    for (size_t i = 0; i < px; ++i) {
      const double eu = e.v[2 * i], ev = e.v[2 * i + 1];
      const double ru = eu - (double(gts[l].v[2 * i]) + target_shift);
      const double rv = ev - (double(gts[l].v[2 * i + 1]) + target_shift);
      const double r = std::fabs(ru) + std::fabs(rv);
      if (!with_unc) {
        lvl += r;
        if (de) {
          de->v[2 * i] = float((ru > 0 ? 1.0 : ru < 0 ? -1.0 : 0.0) * inv);
          de->v[2 * i + 1] = float((rv > 0 ? 1.0 : rv < 0 ? -1.0 : 0.0) * inv);
        }
        continue;
      }
      const double y = unc->v[i];
      const double sp_div = softplus(y + cfg.epsilon);
      const double sp_reg = softplus(y);
      lvl += r / sp_div + sp_reg;
      if (de) {
        de->v[2 * i] = float((ru > 0 ? 1.0 : ru < 0 ? -1.0 : 0.0) / sp_div * inv);
        de->v[2 * i + 1] = float((rv > 0 ? 1.0 : rv < 0 ? -1.0 : 0.0) / sp_div * inv);
      }
      if (du)
        du->v[i] =
            float((-r * sigmoid(y + cfg.epsilon) / (sp_div * sp_div) + sigmoid(y)) * inv);
    }
    total += lvl * inv;
  }
  if (!std::isfinite(total)) throw numeric_error("loss: non-finite value");
  return total;
}

inline double loss_value(const PyramidOutput& py, const Tensor& gt, const LossConfig& cfg) {
  return loss_value_and_grad(py, gt, cfg, nullptr, nullptr);
}

inline Tensor flow_to_tensor(const FlowField& f) {
  Tensor t(1, f.height, f.width, 2);
  std::copy(f.uv.begin(), f.uv.end(), t.v.begin());
  return t;
}

inline double multiscale_uncertainty_loss(const PyramidOutput& py, const FlowField& gt,
                                          const LossConfig& cfg) {
  LossConfig c = cfg;
  c.mode = NetMode::multiscale_uncertainty;
  return loss_value(py, flow_to_tensor(gt), c);
}

inline double loss_variant(const PyramidOutput& py, const FlowField& gt, const LossConfig& cfg) {
  return loss_value(py, flow_to_tensor(gt), cfg);
}

// ---------------------------------------------------------------------------
// Finite-difference checker: analytic loss gradients w.r.t. the raw per-level
// deltas and uncertainties vs central differences. Coordinates whose
// perturbation crosses an L1 kink (a residual sign change) are excluded and
// reported rather than failed.

struct GradCheckReport {
  int checked = 0;
  int excluded = 0;
  double max_rel = 0;
};

namespace detail {

// Double-precision replica of the accumulate + loss forward, mirroring the
// production formulas. Finite differences need ~1e-8 relative precision on
// the loss, far below float storage noise, so the fd side runs in double
// while the analytic side stays on the production float path.
struct LossProbe {
  PyramidOutput py;  // float storage; perturbed coordinates live here
  Tensor gt;
  LossConfig cfg;

  static std::vector<double> dresize(const std::vector<double>& in, int ih, int iw, int c,
                                     int oh, int ow, bool flow_scaled) {
    std::vector<double> out(size_t(oh) * ow * c);
    const double su = double(ow) / iw, sv = double(oh) / ih;
    for (int oy = 0; oy < oh; ++oy) {
      const double sy = align_pos(oy, oh, ih);
      const int y0 = int(sy), y1 = std::min(y0 + 1, ih - 1);
      const double wy = sy - y0;
      for (int ox = 0; ox < ow; ++ox) {
        const double sx = align_pos(ox, ow, iw);
        const int x0 = int(sx), x1 = std::min(x0 + 1, iw - 1);
        const double wx = sx - x0;
        for (int ci = 0; ci < c; ++ci) {
          auto at = [&](int y, int x) { return in[(size_t(y) * iw + x) * c + ci]; };
          const double top = at(y0, x0) + wx * (at(y0, x1) - at(y0, x0));
          const double bot = at(y1, x0) + wx * (at(y1, x1) - at(y1, x0));
          double v = top + wy * (bot - top);
          if (flow_scaled) v *= ci == 0 ? su : sv;
          out[(size_t(oy) * ow + ox) * c + ci] = v;
        }
      }
    }
    return out;
  }

  // returns loss; fills the residual sign pattern for kink detection
  double eval(std::vector<int8_t>* signs) const {
    const int L = py.levels();
    const bool multi =
        cfg.mode == NetMode::multiscale || cfg.mode == NetMode::multiscale_uncertainty;
    const bool with_unc = cfg.mode == NetMode::multiscale_uncertainty;
    const double shift = cfg.mode == NetMode::shift50 ? cfg.shift : 0.0;
    std::vector<std::vector<double>> est(L), unc(L), gts(L);
    std::vector<double> gfull(gt.v.begin(), gt.v.end());
    for (int l = 0; l < L; ++l) {
      const Tensor& d = py.delta[l];
      est[l].assign(d.v.begin(), d.v.end());
      if (l > 0) {
        auto up = dresize(est[l - 1], d.h / 2, d.w / 2, 2, d.h, d.w, true);
        for (size_t i = 0; i < est[l].size(); ++i) est[l][i] += up[i];
      }
      if (with_unc) {
        unc[l].assign(py.dunc[l].v.begin(), py.dunc[l].v.end());
        if (l > 0) {
          auto up = dresize(unc[l - 1], d.h / 2, d.w / 2, 1, d.h, d.w, false);
          for (size_t i = 0; i < unc[l].size(); ++i) unc[l][i] += up[i];
        }
      }
      gts[l] = d.h == gt.h && d.w == gt.w
                   ? gfull
                   : dresize(gfull, gt.h, gt.w, 2, d.h, d.w, true);
    }
    double total = 0;
    for (int l = multi ? 0 : L - 1; l < L; ++l) {
      const size_t px = est[l].size() / 2;
      const double wl = cfg.level_weights.empty() ? 1.0 : cfg.level_weights[l];
      double lvl = 0;
      for (size_t i = 0; i < px; ++i) {
        const double ru = est[l][2 * i] - (gts[l][2 * i] + shift);
        const double rv = est[l][2 * i + 1] - (gts[l][2 * i + 1] + shift);
        if (signs) {
          signs->push_back(ru > 0 ? 1 : ru < 0 ? -1 : 0);
          signs->push_back(rv > 0 ? 1 : rv < 0 ? -1 : 0);
        }
        const double r = std::fabs(ru) + std::fabs(rv);
        lvl += with_unc ? r / softplus(unc[l][i] + cfg.epsilon) + softplus(unc[l][i]) : r;
      }
      total += lvl * wl / double(px);
    }
    return total;
  }
};

}  // namespace detail

inline GradCheckReport grad_check_loss(const LossConfig& cfg, uint64_t seed, int finest_h = 4,
                                       int finest_w = 4, int levels = 2, double step = 1e-4) {
  require(levels >= 1 && finest_h % (1 << (levels - 1)) == 0 &&
              finest_w % (1 << (levels - 1)) == 0,
          "grad_check: finest resolution must halve cleanly");
  const bool with_unc = cfg.mode == NetMode::multiscale_uncertainty;
  detail::LossProbe probe;
  probe.cfg = cfg;
  Rng rng(seed);
  for (int l = 0; l < levels; ++l) {
    const int h = finest_h >> (levels - 1 - l), w = finest_w >> (levels - 1 - l);
    Tensor d(1, h, w, 2);
    for (auto& x : d.v) x = float(rng.uniform(-1, 1));
    probe.py.delta.push_back(std::move(d));
    if (with_unc) {
      Tensor u(1, h, w, 1);
      for (auto& x : u.v) x = float(rng.uniform(-0.5, 0.5));
      probe.py.dunc.push_back(std::move(u));
    }
  }
  probe.gt = Tensor(1, finest_h, finest_w, 2);
  for (auto& x : probe.gt.v)
    x = float(rng.uniform(-1, 1)) + (cfg.mode == NetMode::shift50 ? -cfg.shift : 0.f);

  accumulate_into(probe.py);
  std::vector<Tensor> d_est, d_unc;
  loss_value_and_grad(probe.py, probe.gt, cfg, &d_est, &d_unc);
  std::vector<Tensor> d_delta, d_dunc;
  accumulate_backward(probe.py, d_est, with_unc ? d_unc : std::vector<Tensor>{}, d_delta, d_dunc);

  GradCheckReport rep;
  auto check_coord = [&](float& x, double analytic) {
    const double save = x;
    std::vector<int8_t> sp, sm;
    x = float(save + step);
    const double hp = double(x) - save;
    const double lp = probe.eval(&sp);
    x = float(save - step);
    const double hm = save - double(x);
    const double lm = probe.eval(&sm);
    x = float(save);
    if (sp != sm) {
      ++rep.excluded;
      return;
    }
    const double fd = (lp - lm) / (hp + hm);
    const double rel = std::fabs(fd - analytic) / std::max({std::fabs(fd), std::fabs(analytic), 1e-4});
    ++rep.checked;
    rep.max_rel = std::max(rep.max_rel, rel);
  };

  for (int l = 0; l < levels; ++l) {
    for (size_t i = 0; i < probe.py.delta[l].v.size(); ++i)
      check_coord(probe.py.delta[l].v[i], d_delta[l].v[i]);
    if (with_unc)
      for (size_t i = 0; i < probe.py.dunc[l].v.size(); ++i)
        check_coord(probe.py.dunc[l].v[i], d_dunc[l].v[i]);
  }
  return rep;
}

// Calibration of the checker itself on a smooth surrogate with an exactly
// known gradient: loss = mean(x^2) over a seeded tensor, evaluated in double.
inline double grad_check_quadratic(uint64_t seed, int h = 4, int w = 4, double step = 1e-4) {
  Tensor t(1, h, w, 2);
  Rng rng(seed);
  for (auto& x : t.v) x = float(rng.uniform(-1, 1));
  auto value = [&]() {
    double s = 0;
    for (float x : t.v) s += double(x) * x;
    return s / double(t.v.size());
  };
  double worst = 0;
  for (size_t i = 0; i < t.v.size(); ++i) {
    float& x = t.v[i];
    const double save = x;
    const double analytic = 2.0 * save / double(t.v.size());
    x = float(save + step);
    const double hp = double(x) - save;
    const double lp = value();
    x = float(save - step);
    const double hm = save - double(x);
    const double lm = value();
    x = float(save);
    const double fd = (lp - lm) / (hp + hm);
    worst = std::max(worst, std::fabs(fd - analytic) /
                                std::max({std::fabs(fd), std::fabs(analytic), 1e-4}));
  }
  return worst;
}

}  // namespace edgeflow
