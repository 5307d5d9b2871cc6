// Core value types, errors, seeded RNG and the thread-pool helper shared by
// every other header in the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace edgeflow {

// ---------------------------------------------------------------------------
// Errors

struct argument_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct spec_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw argument_error(msg);
}

// ---------------------------------------------------------------------------
// Value types. Planes are row-major, channel-interleaved (HWC), float32.

struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;           // 1 grayscale or 3 RGB
  std::vector<float> v;       // intensities in [0,1]

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), v(size_t(h) * w * c, 0.f) {
    require(h >= 1 && w >= 1, "Image: non-positive dims");
    require(c == 1 || c == 3, "Image: channels must be 1 or 3");
  }
  float& at(int y, int x, int c) { return v[(size_t(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return v[(size_t(y) * width + x) * channels + c]; }
};

struct ImagePair {
  int height = 0;
  int width = 0;
  int channels = 0;           // channels of a single frame; stacked holds 2C
  std::vector<float> stacked; // H x W x 2C

  ImagePair() = default;
  ImagePair(const Image& a, const Image& b) {
    require(a.height == b.height && a.width == b.width && a.channels == b.channels,
            "ImagePair: frames must share identical dims");
    height = a.height;
    width = a.width;
    channels = a.channels;
    stacked.resize(size_t(height) * width * 2 * channels);
    const int c = channels;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int k = 0; k < c; ++k) {
          stacked[(size_t(y) * width + x) * 2 * c + k] = a.at(y, x, k);
          stacked[(size_t(y) * width + x) * 2 * c + c + k] = b.at(y, x, k);
        }
  }
};

struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> uv;      // H x W x 2, (u,v) interleaved, pixels/frame

  FlowField() = default;
  FlowField(int h, int w) : height(h), width(w), uv(size_t(h) * w * 2, 0.f) {}
  float& u(int y, int x) { return uv[(size_t(y) * width + x) * 2]; }
  float& v(int y, int x) { return uv[(size_t(y) * width + x) * 2 + 1]; }
  float u(int y, int x) const { return uv[(size_t(y) * width + x) * 2]; }
  float v(int y, int x) const { return uv[(size_t(y) * width + x) * 2 + 1]; }
};

struct UncertaintyField {
  int height = 0;
  int width = 0;
  std::vector<float> v;       // H x W, per-pixel log-uncertainty

  UncertaintyField() = default;
  UncertaintyField(int h, int w) : height(h), width(w), v(size_t(h) * w, 0.f) {}
  float& at(int y, int x) { return v[size_t(y) * width + x]; }
  float at(int y, int x) const { return v[size_t(y) * width + x]; }
};

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> m;     // 0 or 1

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), m(size_t(h) * w, 0) {}
  uint8_t& at(int y, int x) { return m[size_t(y) * width + x]; }
  uint8_t at(int y, int x) const { return m[size_t(y) * width + x]; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t b : m) n += b != 0;
    return n;
  }
};

template <class T>
inline bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(double(x))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Seeded RNG. std::mt19937_64 gives a pinned bit stream; the value helpers
// below avoid std::uniform_real_distribution, whose output is
// implementation-defined, so identical seeds give identical samples anywhere.

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // uniform in [0,1)
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // inclusive integer range
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(lo <= hi, "uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(eng_() % span);
  }

  // Box-Muller, one sample per call (partner discarded to keep the stream simple)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // splitmix64 sub-seed derivation for (master seed, index) streams
  static uint64_t derive(uint64_t master, uint64_t index) {
    uint64_t z = master + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Worker control. Timing harnesses pin this to 1; otherwise defaults to the
// hardware concurrency. Results never depend on the worker count: every task
// owns a disjoint output slice and all reductions run on the calling thread.

inline int& worker_count() {
  static int n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

template <class Fn>
inline void parallel_for(int64_t begin, int64_t end, Fn&& fn, int workers = 0) {
  if (workers <= 0) workers = worker_count();
  int64_t count = end - begin;
  if (count <= 0) return;
  workers = int(std::min<int64_t>(workers, count));
  if (workers <= 1) {
    for (int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  int64_t chunk = (count + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    int64_t lo = begin + t * chunk;
    int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// FNV-1a over raw bytes; used for golden regression hashes of integer outputs.
inline uint64_t fnv1a(const void* data, size_t bytes) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace edgeflow
