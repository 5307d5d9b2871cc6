#pragma once

// Spatial M x N chunking into the batch dimension, with optional overlap.
// Source windows are the base tiles expanded by overlap_px on every interior
// side; border windows shift inward so all chunks share identical dims.
// Outputs are cropped back to the base tiles and placed, never blended.

#include <chrono>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "edgeflow/core.hpp"
#include "edgeflow/tensor.hpp"

namespace edgeflow {

struct ChunkWindow {
  int y0 = 0, x0 = 0;        // source window origin in the image
  int crop_y = 0, crop_x = 0;  // origin of the kept region inside the chunk
  int dest_y = 0, dest_x = 0;  // placement origin in the reassembled image
};

struct ChunkPlan {
  int height = 0, width = 0;
  int rows = 0, cols = 0;      // M, N
  int overlap_px = 0;
  int chunk_h = 0, chunk_w = 0;  // uniform source window dims
  int tile_h = 0, tile_w = 0;    // kept output dims per chunk
  std::vector<ChunkWindow> windows;  // row-major, k = row * cols + col

  int count() const { return rows * cols; }
};

namespace detail {

// per-axis window starts: base tiles expanded by the overlap on interior
// sides, shifted inward at the borders to keep one uniform size
inline void axis_windows(int extent, int m, int overlap, int& dim, std::vector<int>& starts) {
  const int tile = extent / m;
  const int pad = overlap * std::min(m - 1, 2);
  dim = tile + pad;
  starts.resize(m);
  for (int i = 0; i < m; ++i) {
    const int want = i * tile - (i > 0 ? overlap : 0);
    starts[i] = std::clamp(want, 0, extent - dim);
  }
}

}  // namespace detail

inline ChunkPlan plan_chunks(int height, int width, int rows, int cols, int overlap_px) {
  require(height >= 1 && width >= 1, "plan_chunks: non-positive image dims");
  require(rows >= 1 && cols >= 1, "plan_chunks: chunk factors must be at least 1");
  require(height % rows == 0, "plan_chunks: height " + std::to_string(height) +
                                  " not divisible by M=" + std::to_string(rows));
  require(width % cols == 0, "plan_chunks: width " + std::to_string(width) +
                                 " not divisible by N=" + std::to_string(cols));
  require(overlap_px >= 0 && overlap_px % 2 == 0,
          "plan_chunks: overlap must be a non-negative even integer");
  require(overlap_px < std::min(height / rows, width / cols),
          "plan_chunks: overlap " + std::to_string(overlap_px) + " too large for tile " +
              std::to_string(height / rows) + "x" + std::to_string(width / cols));

  ChunkPlan plan;
  plan.height = height;
  plan.width = width;
  plan.rows = rows;
  plan.cols = cols;
  plan.overlap_px = overlap_px;
  plan.tile_h = height / rows;
  plan.tile_w = width / cols;
  std::vector<int> ys, xs;
  detail::axis_windows(height, rows, overlap_px, plan.chunk_h, ys);
  detail::axis_windows(width, cols, overlap_px, plan.chunk_w, xs);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      ChunkWindow w;
      w.y0 = ys[i];
      w.x0 = xs[j];
      w.dest_y = i * plan.tile_h;
      w.dest_x = j * plan.tile_w;
      w.crop_y = w.dest_y - w.y0;
      w.crop_x = w.dest_x - w.x0;
      plan.windows.push_back(w);
    }
  return plan;
}

// Batched extraction: k = row * cols + col along the batch axis.
inline Tensor extract_chunks(const Tensor& image, const ChunkPlan& plan) {
  require(image.n == 1, "extract_chunks: expects a single image tensor");
  require(image.h == plan.height && image.w == plan.width,
          "extract_chunks: image dims do not match the plan");
  Tensor out(plan.count(), plan.chunk_h, plan.chunk_w, image.c);
  for (int k = 0; k < plan.count(); ++k) {
    const ChunkWindow& w = plan.windows[k];
    for (int y = 0; y < plan.chunk_h; ++y) {
      const float* src = image.at(0, w.y0 + y, w.x0);
      float* dst = out.at(k, y, 0);
      std::copy(src, src + size_t(plan.chunk_w) * image.c, dst);
    }
  }
  return out;
}

inline Tensor extract_chunks(const ImagePair& pair, const ChunkPlan& plan) {
  Tensor img(1, pair.height, pair.width, 2 * pair.channels);
  std::copy(pair.stacked.begin(), pair.stacked.end(), img.v.begin());
  return extract_chunks(img, plan);
}

// Crop-and-place reassembly; every output pixel comes from exactly one chunk.
inline Tensor reassemble_chunks(const Tensor& outputs, const ChunkPlan& plan) {
  require(outputs.n == plan.count(), "reassemble_chunks: batch size does not match the plan");
  require(outputs.h == plan.chunk_h && outputs.w == plan.chunk_w,
          "reassemble_chunks: chunk dims do not match the plan");
  Tensor out(1, plan.height, plan.width, outputs.c);
  for (int k = 0; k < plan.count(); ++k) {
    const ChunkWindow& w = plan.windows[k];
    for (int y = 0; y < plan.tile_h; ++y) {
      const float* src = outputs.at(k, w.crop_y + y, w.crop_x);
      float* dst = out.at(0, w.dest_y + y, w.dest_x);
      std::copy(src, src + size_t(plan.tile_w) * outputs.c, dst);
    }
  }
  return out;
}

inline FlowField reassemble_flow(const Tensor& outputs, const ChunkPlan& plan) {
  require(outputs.c == 2, "reassemble_flow: expects 2-channel chunk outputs");
  Tensor t = reassemble_chunks(outputs, plan);
  FlowField f(plan.height, plan.width);
  std::copy(t.v.begin(), t.v.end(), f.uv.begin());
  return f;
}

struct ChunkedResult {
  FlowField flow;
  double seconds = 0;  // wall time of the inference call only
};

// infer_batch maps the (M*N, ch, cw, 2C) stack to an (M*N, ch, cw, 2) flow
// stack; float and quantized paths both fit this shape.
inline ChunkedResult chunked_infer(const ImagePair& pair, const ChunkPlan& plan,
                                   const std::function<Tensor(const Tensor&)>& infer_batch) {
  Tensor chunks = extract_chunks(pair, plan);
  const auto t0 = std::chrono::steady_clock::now();
  Tensor flows = infer_batch(chunks);
  const auto t1 = std::chrono::steady_clock::now();
  require(flows.n == plan.count() && flows.h == plan.chunk_h && flows.w == plan.chunk_w,
          "chunked_infer: inference must preserve chunk geometry");
  ChunkedResult r;
  r.flow = reassemble_flow(flows, plan);
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  return r;
}

inline std::string plan_to_string(const ChunkPlan& plan) {
  std::ostringstream os;
  os << "chunks " << plan.rows << "x" << plan.cols << " overlap " << plan.overlap_px
     << " image " << plan.height << "x" << plan.width << " chunk " << plan.chunk_h << "x"
     << plan.chunk_w << "\n";
  for (int k = 0; k < plan.count(); ++k) {
    const ChunkWindow& w = plan.windows[k];
    os << "  chunk " << k << ": src [" << w.y0 << "," << w.y0 + plan.chunk_h << ")x[" << w.x0
       << "," << w.x0 + plan.chunk_w << ") keep +(" << w.crop_y << "," << w.crop_x
       << ") -> dest (" << w.dest_y << "," << w.dest_x << ")\n";
  }
  return os.str();
}

}  // namespace edgeflow
