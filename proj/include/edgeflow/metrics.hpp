#pragma once

// Evaluation lenses: endpoint error, flow-magnitude obstacle masks, IoU and
// detection rate, plus a serializable evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "edgeflow/core.hpp"

namespace edgeflow {

inline double epe(const FlowField& pred, const FlowField& gt, const Mask* mask = nullptr) {
  require(pred.height == gt.height && pred.width == gt.width, "epe: dimension mismatch");
  if (mask)
    require(mask->height == gt.height && mask->width == gt.width, "epe: mask dimension mismatch");
  double sum = 0;
  size_t n = 0;
  for (size_t i = 0; i < pred.uv.size(); i += 2) {
    if (mask && !mask->m[i / 2]) continue;
    const double du = double(pred.uv[i]) - gt.uv[i];
    const double dv = double(pred.uv[i + 1]) - gt.uv[i + 1];
    sum += std::sqrt(du * du + dv * dv);
    ++n;
  }
  return n == 0 ? 0.0 : sum / double(n);
}

inline Mask flow_magnitude_mask(const FlowField& flow, double threshold) {
  require(threshold >= 0, "flow_magnitude_mask: negative threshold");
  Mask m(flow.height, flow.width);
  for (size_t i = 0; i < m.m.size(); ++i) {
    const double u = flow.uv[2 * i], v = flow.uv[2 * i + 1];
    m.m[i] = u * u + v * v > threshold * threshold;
  }
  return m;
}

inline double iou(const Mask& a, const Mask& b) {
  require(a.height == b.height && a.width == b.width, "iou: dimension mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.m.size(); ++i) {
    inter += a.m[i] && b.m[i];
    uni += a.m[i] || b.m[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

inline double detection_rate(const std::vector<double>& ious, double threshold = 0.5) {
  if (ious.empty()) return 0.0;
  size_t hits = 0;
  for (double v : ious) hits += v > threshold;
  return double(hits) / double(ious.size());
}

inline double percentile(std::vector<double> v, double p) {
  require(!v.empty(), "percentile: empty sample");
  require(p >= 0 && p <= 100, "percentile: p outside [0,100]");
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * double(v.size() - 1);
  const size_t lo = size_t(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - double(lo);
  return v[lo] + w * (v[hi] - v[lo]);
}

// Threshold for calling a region a moving obstacle, from the scene statistics:
// halfway between the background flow magnitude tail and the object speed.
inline double obstacle_threshold(double bg_p95_magnitude, double fg_speed) {
  return 0.5 * (bg_p95_magnitude + fg_speed);
}

struct EvalReport {
  double mean_epe = 0;
  std::vector<double> sample_epe;
  double dr = 0;
  std::vector<double> sample_iou;
  std::string config_echo;

  void validate() const {
    require(dr >= 0 && dr <= 1, "EvalReport: DR outside [0,1]");
    for (double v : sample_iou) require(v >= 0 && v <= 1, "EvalReport: IoU outside [0,1]");
    require(mean_epe >= 0, "EvalReport: negative EPE");
  }
};

inline EvalReport make_eval_report(const std::vector<double>& epes,
                                   const std::vector<double>& ious,
                                   const std::string& config_echo) {
  EvalReport r;
  r.sample_epe = epes;
  r.sample_iou = ious;
  for (double v : epes) r.mean_epe += v;
  if (!epes.empty()) r.mean_epe /= double(epes.size());
  r.dr = detection_rate(ious);
  r.config_echo = config_echo;
  r.validate();
  return r;
}

// Line-delimited records: one line per sample, then a summary line.
inline void write_eval_report(std::ostream& os, const EvalReport& r) {
  for (size_t i = 0; i < std::max(r.sample_epe.size(), r.sample_iou.size()); ++i) {
    os << "{\"sample\": " << i;
    if (i < r.sample_epe.size()) os << ", \"epe\": " << r.sample_epe[i];
    if (i < r.sample_iou.size()) os << ", \"iou\": " << r.sample_iou[i];
    os << "}\n";
  }
  os << "{\"mean_epe\": " << r.mean_epe << ", \"dr\": " << r.dr << ", \"samples\": "
     << std::max(r.sample_epe.size(), r.sample_iou.size());
  if (!r.config_echo.empty()) os << ", \"config\": \"" << r.config_echo << "\"";
  os << "}\n";
}

inline std::string eval_summary(const EvalReport& r) {
  std::ostringstream os;
  os << "samples " << std::max(r.sample_epe.size(), r.sample_iou.size()) << "  mean EPE "
     << r.mean_epe << " px";
  if (!r.sample_iou.empty()) os << "  DR " << r.dr;
  return os.str();
}

}  // namespace edgeflow
