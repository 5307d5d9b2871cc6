#pragma once

// Mini-batch Adam training loop: deterministic shuffling, per-epoch
// checkpoints and line-delimited history, divergence abort that keeps the
// last good weights.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "edgeflow/image.hpp"
#include "edgeflow/flow_io.hpp"
#include "edgeflow/loss.hpp"
#include "edgeflow/metrics.hpp"
#include "edgeflow/synthgen.hpp"

namespace edgeflow {

struct TrainConfig {
  double lr = 1e-4;
  int batch = 32;
  int epochs = 0;
  uint64_t seed = 0;
  double val_fraction = 0.05;  // held-out tail of the manifest order
  std::string out_dir;         // empty: no checkpoints or history files
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

inline void validate_train_config(const TrainConfig& tc) {
  require(tc.lr > 0, "train: learning rate must be positive");
  require(tc.batch >= 1, "train: batch size must be at least 1");
  require(tc.epochs >= 0, "train: negative epoch count");
  require(tc.val_fraction >= 0 && tc.val_fraction < 1, "train: val fraction outside [0,1)");
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_epe = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  bool diverged = false;
  int divergence_epoch = -1;  // 1-based epoch during which the loss went non-finite
};

struct TrainSample {
  Tensor input;  // 1 x H x W x 2C
  Tensor gt;     // 1 x H x W x 2
};

inline TrainSample load_sample(const std::filesystem::path& base, const ManifestRecord& rec) {
  const Image a = image_read((base / rec.img1).string());
  const Image b = image_read((base / rec.img2).string());
  const FlowField f = flo_read((base / rec.flo).string());
  require(a.height == f.height && a.width == f.width, "load_sample: image/flow dim mismatch");
  TrainSample s;
  s.input = pair_to_tensor(ImagePair(a, b));
  s.gt = flow_to_tensor(f);
  return s;
}

inline std::vector<TrainSample> load_dataset(const std::string& manifest_path) {
  const auto records = manifest_read(manifest_path);
  require(!records.empty(), "train: empty dataset manifest");
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<TrainSample> out;
  out.reserve(records.size());
  for (const auto& rec : records) out.push_back(load_sample(base, rec));
  for (size_t i = 1; i < out.size(); ++i)
    require(out[i].input.h == out[0].input.h && out[i].input.w == out[0].input.w &&
                out[i].input.c == out[0].input.c,
            "train: dataset samples must share one resolution");
  return out;
}

// Adam state per layer, weights and biases separately.
struct Adam {
  double beta1, beta2, eps;
  int64_t t = 0;
  std::vector<std::vector<float>> mw, vw, mb, vb;

  Adam(const Weights& ws, const TrainConfig& tc)
      : beta1(tc.beta1), beta2(tc.beta2), eps(tc.adam_eps) {
    for (const auto& l : ws.layers) {
      mw.emplace_back(l.w.size(), 0.f);
      vw.emplace_back(l.w.size(), 0.f);
      mb.emplace_back(l.b.size(), 0.f);
      vb.emplace_back(l.b.size(), 0.f);
    }
  }

  void step(Weights& ws, const Gradients& g, double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, double(t));
    const double c2 = 1.0 - std::pow(beta2, double(t));
    auto upd = [&](std::vector<float>& p, const std::vector<float>& gr, std::vector<float>& m,
                   std::vector<float>& v) {
      for (size_t i = 0; i < p.size(); ++i) {
        const double gi = gr[i];
        const double mi = beta1 * m[i] + (1 - beta1) * gi;
        const double vi = beta2 * v[i] + (1 - beta2) * gi * gi;
        m[i] = float(mi);
        v[i] = float(vi);
        p[i] -= float(lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
      }
    };
    for (size_t i = 0; i < ws.layers.size(); ++i) {
      upd(ws.layers[i].w, g.w[i], mw[i], vw[i]);
      upd(ws.layers[i].b, g.b[i], mb[i], vb[i]);
    }
  }
};

namespace detail {

inline Tensor stack_batch(const std::vector<TrainSample>& data, const std::vector<size_t>& idx,
                          size_t first, size_t count, bool gt) {
  const Tensor& proto = gt ? data[idx[first]].gt : data[idx[first]].input;
  Tensor out(int(count), proto.h, proto.w, proto.c);
  const size_t stride = proto.v.size();
  for (size_t k = 0; k < count; ++k) {
    const Tensor& src = gt ? data[idx[first + k]].gt : data[idx[first + k]].input;
    std::copy(src.v.begin(), src.v.end(), out.v.begin() + k * stride);
  }
  return out;
}

}  // namespace detail

// One optimizer step on a stacked batch; returns the batch loss.
inline double train_step(Weights& ws, Adam& opt, const Tensor& input, const Tensor& gt,
                         const TrainConfig& tc, const LossConfig& lc) {
  ForwardTrace tr = forward_trace(input, ws);
  std::vector<Tensor> d_est, d_unc;
  const double loss = loss_value_and_grad(tr.py, gt, lc, &d_est, &d_unc);
  Gradients g = Gradients::zeros_like(ws);
  backward(tr, ws, d_est,
           lc.mode == NetMode::multiscale_uncertainty ? d_unc : std::vector<Tensor>{}, g);
  opt.step(ws, g, tc.lr);
  return loss;
}

inline double validation_epe(const Weights& ws, const std::vector<TrainSample>& data,
                             const std::vector<size_t>& idx, int batch) {
  double sum = 0;
  size_t n = 0;
  for (size_t first = 0; first < idx.size(); first += batch) {
    const size_t count = std::min(size_t(batch), idx.size() - first);
    Tensor in = detail::stack_batch(data, idx, first, count, false);
    Tensor gt = detail::stack_batch(data, idx, first, count, true);
    PyramidOutput py = forward(in, ws);
    for (size_t k = 0; k < count; ++k) {
      FlowField pred = py.flow(int(k));
      FlowField ref(gt.h, gt.w);
      std::copy(gt.v.begin() + k * ref.uv.size(), gt.v.begin() + (k + 1) * ref.uv.size(),
                ref.uv.begin());
      sum += epe(pred, ref);
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / double(n);
}

inline void write_history(const std::string& path, const TrainHistory& h) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw io_error("train: cannot write history " + path);
  for (const auto& e : h.epochs)
    os << "{\"epoch\": " << e.epoch << ", \"train_loss\": " << e.train_loss
       << ", \"val_epe\": " << e.val_epe << "}\n";
  if (h.diverged)
    os << "{\"diverged_at_epoch\": " << h.divergence_epoch << "}\n";
}

inline std::pair<Weights, TrainHistory> train(const Weights& start,
                                              const std::vector<TrainSample>& data,
                                              const TrainConfig& tc, const LossConfig& lc) {
  validate_train_config(tc);
  require(!data.empty(), "train: empty dataset");
  require(lc.mode == start.cfg.output_mode, "train: loss mode does not match network mode");
  if (lc.mode == NetMode::shift50)
    require(lc.shift == start.cfg.shift, "train: shift mismatch between loss and network");

  const size_t n = data.size();
  const size_t val_n = n >= 2 ? std::max<size_t>(1, size_t(std::llround(double(n) * tc.val_fraction)))
                              : n;
  std::vector<size_t> train_idx, val_idx;
  for (size_t i = 0; i + (n >= 2 ? val_n : 0) < n; ++i) train_idx.push_back(i);
  for (size_t i = n - val_n; i < n; ++i) val_idx.push_back(i);
  if (train_idx.empty()) train_idx = val_idx;

  Weights ws = start;
  Weights last_good = start;
  Adam opt(ws, tc);
  TrainHistory hist;
  const std::filesystem::path out_dir = tc.out_dir;
  if (!tc.out_dir.empty()) std::filesystem::create_directories(out_dir);

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<size_t> order = train_idx;
    Rng shuffle_rng(Rng::derive(tc.seed, uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform(0, double(i))) % i]);

    double loss_sum = 0;
    size_t seen = 0;
    bool bad = false;
    for (size_t first = 0; first < order.size(); first += tc.batch) {
      const size_t count = std::min(size_t(tc.batch), order.size() - first);
      Tensor in = detail::stack_batch(data, order, first, count, false);
      Tensor gt = detail::stack_batch(data, order, first, count, true);
      double loss;
      try {
        loss = train_step(ws, opt, in, gt, tc, lc);
      } catch (const numeric_error&) {
        loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(loss)) {
        bad = true;
        break;
      }
      loss_sum += loss * double(count);
      seen += count;
    }
    if (bad) {
      hist.diverged = true;
      hist.divergence_epoch = epoch;
      ws = last_good;
      break;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / double(seen) : 0.0;
    rec.val_epe = validation_epe(ws, data, val_idx, tc.batch);
    hist.epochs.push_back(rec);
    last_good = ws;
    if (!tc.out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_epoch_%03d.efnw", epoch);
      save_weights(ws, (out_dir / name).string());
      write_history((out_dir / "history.jsonl").string(), hist);
    }
  }
  if (!tc.out_dir.empty()) {
    save_weights(ws, (out_dir / "model.efnw").string());
    write_history((out_dir / "history.jsonl").string(), hist);
  }
  return {std::move(ws), std::move(hist)};
}

inline std::pair<Weights, TrainHistory> train(const Weights& start,
                                              const std::string& manifest_path,
                                              const TrainConfig& tc, const LossConfig& lc) {
  return train(start, load_dataset(manifest_path), tc, lc);
}

}  // namespace edgeflow
