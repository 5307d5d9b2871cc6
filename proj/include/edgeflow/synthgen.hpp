// Synthetic image pairs with analytically exact ground-truth flow.
//
// Scenes are rigid translations of procedurally textured surfaces: a
// band-limited background plus disc/rectangle foreground objects, each with
// its own velocity. Textures are sums of cosine waves, so both frames can be
// evaluated at arbitrary real coordinates and sub-pixel velocities stay
// exact. Flow at a pixel is the velocity of the topmost surface covering it
// in frame 1 (occluded pixels carry the occluding object's flow).
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "edgeflow/core.hpp"
#include "edgeflow/flow_io.hpp"
#include "edgeflow/image.hpp"

namespace edgeflow {

enum class ObjectShape { disc, rectangle };

struct SceneObject {
  ObjectShape shape = ObjectShape::disc;
  double size = 8;   // disc radius or rectangle half-side, px
  double y = 0, x = 0;   // frame-1 center
  double vy = 0, vx = 0; // px/frame
};

struct SceneSpec {
  int height = 96;
  int width = 128;
  int channels = 1;
  uint64_t texture_seed = 1;
  std::vector<SceneObject> objects;
  double bg_vy = 0, bg_vx = 0;
  double noise_amp = 0;
  double max_flow = 8;
};

// ---------------------------------------------------------------------------
// Band-limited texture: mean + sum of cosine plane waves. Wavelengths are
// kept >= 32 px so bilinear warp-consistency error stays well under the
// 2/255 budget the dataset promises.

struct Texture {
  struct Wave {
    float kx, ky, phase, amp;
  };
  float mean = 0.5f;
  std::vector<Wave> waves;

  static Texture make(uint64_t seed, int n_waves = 10, double lambda_min = 32,
                      double lambda_max = 128, double amp_total = 0.3, double mean_lo = 0.38,
                      double mean_hi = 0.62) {
    Rng rng(seed);
    Texture t;
    t.mean = float(rng.uniform(mean_lo, mean_hi));
    t.waves.resize(n_waves);
    double per = amp_total / n_waves;
    for (auto& w : t.waves) {
      double lambda = rng.uniform(lambda_min, lambda_max);
      double theta = rng.uniform(0, 2 * 3.14159265358979323846);
      double k = 2 * 3.14159265358979323846 / lambda;
      w.kx = float(k * std::cos(theta));
      w.ky = float(k * std::sin(theta));
      w.phase = float(rng.uniform(0, 2 * 3.14159265358979323846));
      w.amp = float(per);
    }
    return t;
  }

  float eval(double x, double y) const {
    float s = mean;
    for (const auto& w : waves) s += w.amp * std::cos(float(w.kx * x + w.ky * y + w.phase));
    return s;
  }
};

namespace detail {

inline bool object_covers(const SceneObject& obj, double t, double py, double px) {
  double cy = obj.y + t * obj.vy;
  double cx = obj.x + t * obj.vx;
  if (obj.shape == ObjectShape::disc) {
    double dy = py - cy, dx = px - cx;
    return dy * dy + dx * dx <= obj.size * obj.size;
  }
  return std::abs(py - cy) <= obj.size && std::abs(px - cx) <= obj.size;
}

// index of the topmost (= last listed) object covering the pixel, or -1
inline int topmost_object(const SceneSpec& spec, double t, double py, double px) {
  for (int i = int(spec.objects.size()) - 1; i >= 0; --i)
    if (object_covers(spec.objects[i], t, py, px)) return i;
  return -1;
}

}  // namespace detail

inline void validate_scene(const SceneSpec& spec) {
  if (spec.height < 8 || spec.width < 8)
    throw spec_error("scene: canvas must be at least 8x8");
  if (spec.channels != 1 && spec.channels != 3)
    throw spec_error("scene: channels must be 1 or 3");
  if (std::hypot(spec.bg_vx, spec.bg_vy) > spec.max_flow + 1e-9)
    throw spec_error("scene: background velocity exceeds max flow magnitude");
  for (size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (o.size < 1) throw spec_error("scene: object " + std::to_string(i) + " smaller than 1 px");
    if (std::hypot(o.vx, o.vy) > spec.max_flow + 1e-9)
      throw spec_error("scene: object " + std::to_string(i) + " velocity exceeds max flow");
    for (double t : {0.0, 1.0}) {
      double cy = o.y + t * o.vy, cx = o.x + t * o.vx;
      if (cy - o.size < 0 || cy + o.size > spec.height - 1 || cx - o.size < 0 ||
          cx + o.size > spec.width - 1)
        throw spec_error("scene: object " + std::to_string(i) + " leaves canvas at t=" +
                         std::to_string(int(t)));
    }
  }
}

struct SynthSample {
  ImagePair pair;
  FlowField flow;
  Mask object_mask;  // union of frame-1 object footprints
  Image frame1, frame2;
};

inline SynthSample gen_translation_sample(uint64_t seed, const SceneSpec& spec) {
  validate_scene(spec);
  const int H = spec.height, W = spec.width, C = spec.channels;

  Texture bg = Texture::make(Rng::derive(spec.texture_seed, 0));
  std::vector<Texture> obj_tex;
  for (size_t i = 0; i < spec.objects.size(); ++i)
    obj_tex.push_back(Texture::make(Rng::derive(spec.texture_seed, 100 + i)));

  SynthSample out;
  out.frame1 = Image(H, W, C);
  out.frame2 = Image(H, W, C);
  out.flow = FlowField(H, W);
  out.object_mask = Mask(H, W);

  for (int t = 0; t < 2; ++t) {
    Image& frame = t == 0 ? out.frame1 : out.frame2;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int top = detail::topmost_object(spec, t, y, x);
        float val;
        if (top >= 0) {
          const auto& o = spec.objects[top];
          val = obj_tex[top].eval(x - t * o.vx, y - t * o.vy);
        } else {
          val = bg.eval(x - t * spec.bg_vx, y - t * spec.bg_vy);
        }
        for (int c = 0; c < C; ++c) frame.at(y, x, c) = val;
      }
  }

  if (spec.noise_amp > 0) {
    Rng noise(Rng::derive(seed, 7));
    for (float* f : {out.frame1.v.data(), out.frame2.v.data()}) {
      size_t n = size_t(H) * W * C;
      for (size_t i = 0; i < n; ++i) {
        f[i] = std::clamp(f[i] + float(noise.uniform(-spec.noise_amp, spec.noise_amp)), 0.f, 1.f);
      }
    }
  }

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int top = detail::topmost_object(spec, 0, y, x);
      if (top >= 0) {
        out.flow.u(y, x) = float(spec.objects[top].vx);
        out.flow.v(y, x) = float(spec.objects[top].vy);
        out.object_mask.at(y, x) = 1;
      } else {
        out.flow.u(y, x) = float(spec.bg_vx);
        out.flow.v(y, x) = float(spec.bg_vy);
      }
    }

  out.pair = ImagePair(out.frame1, out.frame2);
  return out;
}

// Pixels whose warp lands cleanly on their own surface in frame 2; excludes
// occlusion/accretion bands where the bilinear sample would mix surfaces.
inline Mask warp_consistent_mask(const SceneSpec& spec) {
  Mask ok(spec.height, spec.width);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      int top = detail::topmost_object(spec, 0, y, x);
      double vx = top >= 0 ? spec.objects[top].vx : spec.bg_vx;
      double vy = top >= 0 ? spec.objects[top].vy : spec.bg_vy;
      double ty = y + vy, tx = x + vx;
      if (ty < 0 || tx < 0 || ty > spec.height - 1 || tx > spec.width - 1) continue;
      bool clean = true;
      for (int dy = 0; dy <= 1 && clean; ++dy)
        for (int dx = 0; dx <= 1 && clean; ++dx) {
          int ny = std::min(int(ty) + dy, spec.height - 1);
          int nx = std::min(int(tx) + dx, spec.width - 1);
          if (detail::topmost_object(spec, 1, ny, nx) != top) clean = false;
        }
      ok.at(y, x) = clean ? 1 : 0;
    }
  return ok;
}

// ---------------------------------------------------------------------------
// The seam-centered ball scenario: stationary textured background, textured
// disc moving left to right. With center_on_seam the frame-1 disc center
// sits at (H/2, W/2), so a 2x2 chunking seam crosses it.

struct BallScene {
  ImagePair pair;
  FlowField flow;
  Mask mask;       // frame-1 disc footprint
  SceneSpec spec;  // the realized scene, for reproducibility
};

inline BallScene gen_ball_scene(double radius_px, bool center_on_seam, double ball_speed_px,
                                int height = 192, int width = 256, uint64_t seed = 7) {
  if (radius_px < 2) throw spec_error("gen_ball_scene: radius must be >= 2 px");
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.texture_seed = seed;
  spec.max_flow = std::max(8.0, std::abs(ball_speed_px));
  SceneObject ball;
  ball.shape = ObjectShape::disc;
  ball.size = radius_px;
  ball.y = center_on_seam ? height / 2.0 : height * 5.0 / 8.0;
  ball.x = center_on_seam ? width / 2.0 : width * 5.0 / 8.0;
  ball.vy = 0;
  ball.vx = ball_speed_px;
  spec.objects.push_back(ball);
  validate_scene(spec);  // rejects radii/speeds that leave the canvas

  SynthSample s = gen_translation_sample(seed, spec);
  return BallScene{std::move(s.pair), std::move(s.flow), std::move(s.object_mask), spec};
}

// ---------------------------------------------------------------------------
// Dataset generation: paired images + .flo ground truth + manifest.
// Manifest is line-oriented text, one record per sample:
//   index, seed, img1, img2, flo, mask

struct SceneDistribution {
  int height = 96;
  int width = 128;
  int channels = 1;
  double max_flow = 8;
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 7;
  double max_size = 22;
  double noise_amp = 0.002;
  double bg_speed_max = 8;   // clamped to max_flow
};

inline SceneSpec draw_scene(Rng& rng, const SceneDistribution& dist) {
  SceneSpec spec;
  spec.height = dist.height;
  spec.width = dist.width;
  spec.channels = dist.channels;
  spec.max_flow = dist.max_flow;
  spec.noise_amp = dist.noise_amp;
  spec.texture_seed = rng.next();
  double bg_speed = rng.uniform(0, std::min(dist.bg_speed_max, dist.max_flow));
  double bg_theta = rng.uniform(0, 2 * 3.14159265358979323846);
  spec.bg_vx = bg_speed * std::cos(bg_theta);
  spec.bg_vy = bg_speed * std::sin(bg_theta);
  int n_obj = int(rng.uniform_int(dist.min_objects, dist.max_objects));
  for (int i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.shape = rng.uniform() < 0.5 ? ObjectShape::disc : ObjectShape::rectangle;
    o.size = rng.uniform(dist.min_size, dist.max_size);
    double speed = rng.uniform(0, dist.max_flow);
    double theta = rng.uniform(0, 2 * 3.14159265358979323846);
    o.vx = speed * std::cos(theta);
    o.vy = speed * std::sin(theta);
    // start so that both endpoints stay inside the canvas
    double lo_y = o.size + std::max(0.0, -o.vy);
    double hi_y = dist.height - 1 - o.size - std::max(0.0, o.vy);
    double lo_x = o.size + std::max(0.0, -o.vx);
    double hi_x = dist.width - 1 - o.size - std::max(0.0, o.vx);
    if (lo_y >= hi_y || lo_x >= hi_x) {  // canvas too tight for this draw; shrink
      o.size = dist.min_size;
      lo_y = o.size + std::abs(o.vy);
      hi_y = dist.height - 1 - o.size - std::abs(o.vy);
      lo_x = o.size + std::abs(o.vx);
      hi_x = dist.width - 1 - o.size - std::abs(o.vx);
    }
    o.y = rng.uniform(lo_y, hi_y);
    o.x = rng.uniform(lo_x, hi_x);
    spec.objects.push_back(o);
  }
  return spec;
}

struct ManifestRecord {
  int64_t index = 0;
  uint64_t seed = 0;
  std::string img1, img2, flo, mask;  // paths relative to the manifest
};

inline void manifest_write(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw io_error("manifest_write: cannot open " + path);
  for (const auto& r : records) {
    os << r.index << ", " << r.seed << ", " << r.img1 << ", " << r.img2 << ", " << r.flo;
    if (!r.mask.empty()) os << ", " << r.mask;
    os << "\n";
  }
}

inline std::vector<ManifestRecord> manifest_read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("manifest_read: cannot open " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      size_t a = tok.find_first_not_of(" \t");
      size_t b = tok.find_last_not_of(" \t\r");
      fields.push_back(a == std::string::npos ? "" : tok.substr(a, b - a + 1));
    }
    if (fields.size() < 5)
      throw format_error("manifest_read: bad record '" + line + "' in " + path);
    ManifestRecord r;
    r.index = std::stoll(fields[0]);
    r.seed = std::stoull(fields[1]);
    r.img1 = fields[2];
    r.img2 = fields[3];
    r.flo = fields[4];
    if (fields.size() > 5) r.mask = fields[5];
    records.push_back(r);
  }
  return records;
}

// Writes count samples under out_dir and returns the manifest records.
// Sample i derives its own seed from (master_seed, i), so regeneration from
// the same master seed is bit-identical.
inline std::vector<ManifestRecord> gen_dataset(int64_t count, const SceneDistribution& dist,
                                               const std::string& out_dir, uint64_t master_seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<ManifestRecord> records;
  for (int64_t i = 0; i < count; ++i) {
    uint64_t seed = Rng::derive(master_seed, uint64_t(i));
    Rng rng(seed);
    SceneSpec spec = draw_scene(rng, dist);
    SynthSample s = gen_translation_sample(seed, spec);
    char name[64];
    std::snprintf(name, sizeof(name), "sample_%05lld", static_cast<long long>(i));
    ManifestRecord r;
    r.index = i;
    r.seed = seed;
    r.img1 = std::string(name) + "_a.pgm";
    r.img2 = std::string(name) + "_b.pgm";
    r.flo = std::string(name) + ".flo";
    r.mask = std::string(name) + "_m.pgm";
    image_write(s.frame1, out_dir + "/" + r.img1);
    image_write(s.frame2, out_dir + "/" + r.img2);
    flo_write(s.flow, out_dir + "/" + r.flo);
    mask_write(s.object_mask, out_dir + "/" + r.mask);
    records.push_back(std::move(r));
  }
  manifest_write(records, out_dir + "/manifest.txt");
  return records;
}

}  // namespace edgeflow
