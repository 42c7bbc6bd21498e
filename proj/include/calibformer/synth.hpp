// Desk-scale synthetic scenes: a ground plane, a back wall and random boxes
// seen by a simulated LiDAR (ray casting) and a shaded pinhole camera.
//
// The LiDAR frame is x forward, y left, z up (KITTI velodyne convention).
// Both modalities are derived from the same albedo/texture function so the
// camera image and the LiDAR intensity share structure.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "json.hpp"

#include "calibformer/dataio.hpp"
#include "calibformer/geometry.hpp"
#include "calibformer/image.hpp"

namespace calibformer {

/// Generator parameters. Shipped as config/synth_v1.json; bump `version`
/// whenever a default changes.
struct SynthConfig {
  int version = 1;
  int image_width = 1241;
  int image_height = 376;
  CameraIntrinsics intrinsics{718.856, 718.856, 607.1928, 185.2157};
  double lidar_height = 1.73;
  double wall_distance = 30.0;
  double wall_height = 4.0;
  int min_boxes = 4;
  int max_boxes = 10;
  double min_box_size = 0.5;
  double max_box_size = 3.0;
  double box_min_x = 5.0;
  double box_max_x = 28.0;
  double box_max_abs_y = 12.0;
  double elevation_min_deg = -24.9;
  double elevation_max_deg = 2.0;
  double azimuth_half_fov_deg = 45.0;
  double checker_size = 1.5;
  double extrinsic_jitter_deg = 1.0;
  double extrinsic_jitter_m = 0.02;
  std::array<double, 3> camera_offset{0.0, -0.08, -0.27};

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"version", c.version},
       {"image_width", c.image_width},
       {"image_height", c.image_height},
       {"intrinsics", {c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy}},
       {"lidar_height", c.lidar_height},
       {"wall_distance", c.wall_distance},
       {"wall_height", c.wall_height},
       {"min_boxes", c.min_boxes},
       {"max_boxes", c.max_boxes},
       {"min_box_size", c.min_box_size},
       {"max_box_size", c.max_box_size},
       {"box_min_x", c.box_min_x},
       {"box_max_x", c.box_max_x},
       {"box_max_abs_y", c.box_max_abs_y},
       {"elevation_min_deg", c.elevation_min_deg},
       {"elevation_max_deg", c.elevation_max_deg},
       {"azimuth_half_fov_deg", c.azimuth_half_fov_deg},
       {"checker_size", c.checker_size},
       {"extrinsic_jitter_deg", c.extrinsic_jitter_deg},
       {"extrinsic_jitter_m", c.extrinsic_jitter_m},
       {"camera_offset", c.camera_offset}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.version = j.value("version", d.version);
  c.image_width = j.value("image_width", d.image_width);
  c.image_height = j.value("image_height", d.image_height);
  if (j.contains("intrinsics")) {
    const auto k = j.at("intrinsics").get<std::array<double, 4>>();
    c.intrinsics = {k[0], k[1], k[2], k[3]};
  }
  c.lidar_height = j.value("lidar_height", d.lidar_height);
  c.wall_distance = j.value("wall_distance", d.wall_distance);
  c.wall_height = j.value("wall_height", d.wall_height);
  c.min_boxes = j.value("min_boxes", d.min_boxes);
  c.max_boxes = j.value("max_boxes", d.max_boxes);
  c.min_box_size = j.value("min_box_size", d.min_box_size);
  c.max_box_size = j.value("max_box_size", d.max_box_size);
  c.box_min_x = j.value("box_min_x", d.box_min_x);
  c.box_max_x = j.value("box_max_x", d.box_max_x);
  c.box_max_abs_y = j.value("box_max_abs_y", d.box_max_abs_y);
  c.elevation_min_deg = j.value("elevation_min_deg", d.elevation_min_deg);
  c.elevation_max_deg = j.value("elevation_max_deg", d.elevation_max_deg);
  c.azimuth_half_fov_deg = j.value("azimuth_half_fov_deg", d.azimuth_half_fov_deg);
  c.checker_size = j.value("checker_size", d.checker_size);
  c.extrinsic_jitter_deg = j.value("extrinsic_jitter_deg", d.extrinsic_jitter_deg);
  c.extrinsic_jitter_m = j.value("extrinsic_jitter_m", d.extrinsic_jitter_m);
  c.camera_offset = j.value("camera_offset", d.camera_offset);
}

namespace detail {

// Kept out of line: GCC 11 at -O3 folds the inlined double->float->double
// round trip away, which breaks equality with the on-disk float32 values.
[[gnu::noinline]] inline double round_to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}
[[gnu::noinline]] inline Vec3 round_to_float(const Vec3& v) {
  return {round_to_float(v.x()), round_to_float(v.y()), round_to_float(v.z())};
}

}  // namespace detail

namespace synth {

struct Material {
  double albedo = 0.5;
  std::array<double, 3> color{0.5, 0.5, 0.5};
};

struct Box {
  Vec3 lo, hi;
  Material material;
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();
  const Material* material = nullptr;
};

class Scene {
 public:
  Scene(const SynthConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto material = [&] {
      Material m;
      m.albedo = 0.25 + 0.7 * u01(rng);
      for (auto& c : m.color) c = 0.2 + 0.8 * u01(rng);
      return m;
    };
    ground_ = material();
    wall_ = material();
    std::uniform_int_distribution<int> count(cfg.min_boxes, cfg.max_boxes);
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const double sx = cfg.min_box_size + (cfg.max_box_size - cfg.min_box_size) * u01(rng);
      const double sy = cfg.min_box_size + (cfg.max_box_size - cfg.min_box_size) * u01(rng);
      const double sz = cfg.min_box_size + (cfg.max_box_size - cfg.min_box_size) * u01(rng);
      const double cx = cfg.box_min_x + (cfg.box_max_x - cfg.box_min_x) * u01(rng);
      const double cy = (2 * u01(rng) - 1) * cfg.box_max_abs_y;
      const double z0 = -cfg.lidar_height;
      boxes_.push_back({Vec3(cx - sx / 2, cy - sy / 2, z0), Vec3(cx + sx / 2, cy + sy / 2, z0 + sz), material()});
    }
  }

  Hit intersect(const Vec3& o, const Vec3& d) const {
    Hit best;
    const double ground_z = -cfg_.lidar_height;
    if (d.z() < 0) {
      const double t = (ground_z - o.z()) / d.z();
      if (t > 1e-6 && t < best.t) best = {t, Vec3::UnitZ(), &ground_};
    }
    if (d.x() > 0) {
      const double t = (cfg_.wall_distance - o.x()) / d.x();
      const double z = o.z() + t * d.z();
      if (t > 1e-6 && t < best.t && z >= ground_z && z <= ground_z + cfg_.wall_height) {
        best = {t, -Vec3::UnitX(), &wall_};
      }
    }
    for (const Box& b : boxes_) {
      double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
      int axis = -1;
      double sign = 0.0;
      bool miss = false;
      for (int a = 0; a < 3 && !miss; ++a) {
        if (std::abs(d[a]) < 1e-12) {
          miss = o[a] < b.lo[a] || o[a] > b.hi[a];
          continue;
        }
        double ta = (b.lo[a] - o[a]) / d[a], tb = (b.hi[a] - o[a]) / d[a];
        double s = -1.0;
        if (ta > tb) {
          std::swap(ta, tb);
          s = 1.0;
        }
        if (ta > t0) {
          t0 = ta;
          axis = a;
          sign = s;
        }
        t1 = std::min(t1, tb);
        miss = t0 > t1;
      }
      if (!miss && axis >= 0 && t0 > 1e-6 && t0 < best.t) {
        Vec3 n = Vec3::Zero();
        n[axis] = sign;
        best = {t0, n, &b.material};
      }
    }
    return best;
  }

  double texture(const Vec3& p) const {
    const double s = cfg_.checker_size;
    const long k = static_cast<long>(std::floor(p.x() / s) + std::floor(p.y() / s) + std::floor(p.z() / s));
    return (k & 1) ? 1.0 : 0.55;
  }

 private:
  SynthConfig cfg_;
  Material ground_, wall_;
  std::vector<Box> boxes_;
};

}  // namespace synth

/// Deterministic scene for `seed` with exactly `n_points` LiDAR returns.
/// Point and intensity values are rounded to float32 so the in-memory frame
/// equals what the KITTI-format files store.
inline Frame synth_scene(std::uint64_t seed, int n_points, const SynthConfig& cfg = {}) {
  if (n_points < 1) throw Error(ErrorCode::kConfig, "n_points must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  Frame frame;
  frame.intrinsics = cfg.intrinsics;
  Mat3 base;
  base << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  const double j = cfg.extrinsic_jitter_deg;
  const Quaternion jitter = euler_to_quat((2 * u01(rng) - 1) * j, (2 * u01(rng) - 1) * j, (2 * u01(rng) - 1) * j);
  frame.lidar_to_camera.rotation = quat_to_rotmat(jitter) * base;
  for (int a = 0; a < 3; ++a) {
    frame.lidar_to_camera.translation[a] = cfg.camera_offset[a] + (2 * u01(rng) - 1) * cfg.extrinsic_jitter_m;
  }

  const synth::Scene scene(cfg, rng);

  const double az = cfg.azimuth_half_fov_deg * kDegToRad;
  const double el0 = cfg.elevation_min_deg * kDegToRad, el1 = cfg.elevation_max_deg * kDegToRad;
  const long max_attempts = 1000L * n_points;
  long attempts = 0;
  while (static_cast<int>(frame.cloud.size()) < n_points && attempts++ < max_attempts) {
    const double a = (2 * u01(rng) - 1) * az;
    const double e = el0 + (el1 - el0) * u01(rng);
    const Vec3 dir(std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e));
    const synth::Hit hit = scene.intersect(Vec3::Zero(), dir);
    if (!hit.material) continue;
    const Vec3 p = hit.t * dir;
    const double incidence = std::abs(hit.normal.dot(dir));
    const double intensity = std::clamp(hit.material->albedo * scene.texture(p) * (0.5 + 0.5 * incidence), 0.0, 1.0);
    frame.cloud.push_back(detail::round_to_float(p), detail::round_to_float(intensity));
  }
  if (static_cast<int>(frame.cloud.size()) < n_points) {
    throw Error(ErrorCode::kConfig, "synthetic scene produced too few LiDAR returns");
  }

  // Camera: one ray through each pixel center, shaded by a fixed sun.
  const SE3Transform cam_to_lidar = frame.lidar_to_camera.inverse();
  const Vec3 origin = cam_to_lidar.translation;
  const Vec3 sun = Vec3(-0.4, 0.3, 0.85).normalized();
  const CameraIntrinsics& k = cfg.intrinsics;
  frame.image = Image8(cfg.image_width, cfg.image_height, 3);
  for (int y = 0; y < cfg.image_height; ++y) {
    for (int x = 0; x < cfg.image_width; ++x) {
      const Vec3 dir_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      const Vec3 dir = (cam_to_lidar.rotation * dir_cam).normalized();
      const synth::Hit hit = scene.intersect(origin, dir);
      if (!hit.material) continue;
      const Vec3 p = origin + hit.t * dir;
      const double shade = scene.texture(p) * (0.25 + 0.75 * std::max(0.0, hit.normal.dot(sun)));
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(hit.material->color[c] * shade, 0.0, 1.0);
        frame.image.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::max(v, 4.0 / 255.0) * 255.0));
      }
    }
  }
  return frame;
}

}  // namespace calibformer
