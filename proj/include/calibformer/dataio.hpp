// Data ingestion, LiDAR image rendering and training sample assembly.
//
// Frames come either from the KITTI odometry layout or from the synthetic
// scene generator (synth.hpp); both end up as a Frame holding the raw RGB
// image, the point cloud, the camera intrinsics and the ground-truth
// LiDAR-to-camera extrinsic.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "calibformer/error.hpp"
#include "calibformer/geometry.hpp"
#include "calibformer/image.hpp"

namespace calibformer {

namespace fs = std::filesystem;

/// Depth channel stores d / kDepthNormalization clipped to [0, 1].
inline constexpr double kDepthNormalization = 80.0;

struct Resolution {
  int width = 0;
  int height = 0;
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

struct PreprocessConfig {
  Resolution target{512, 256};
  Resolution padded{1280, 384};
};

/// Two-channel LiDAR raster plus validity mask, row-major H x W.
struct LidarImage {
  int width = 0;
  int height = 0;
  std::vector<float> depth;
  std::vector<float> intensity;
  std::vector<std::uint8_t> mask;

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
  friend bool operator==(const LidarImage&, const LidarImage&) = default;
};

/// RGB in [0, 1], planar 3 x H x W.
struct CameraImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  float at(int c, int x, int y) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  friend bool operator==(const CameraImage&, const CameraImage&) = default;
};

struct Frame {
  Image8 image;
  PointCloud cloud;
  CameraIntrinsics intrinsics;
  SE3Transform lidar_to_camera;
};

/// A frame after camera preprocessing; intrinsics are the rescaled ones.
struct PreparedFrame {
  CameraImage camera;
  CameraIntrinsics intrinsics;
  PointCloud cloud;
  SE3Transform lidar_to_camera;
};

struct CalibrationSample {
  CameraImage camera;
  LidarImage lidar;
  PointCloud cloud;
  CameraIntrinsics intrinsics;
  SE3Transform t_init;
  SE3Transform t_gt;  // the injected deviation
};

// ---------------------------------------------------------------------------
// KITTI odometry files

/// Decodes little-endian float32 (x, y, z, reflectance) records.
inline PointCloud decode_kitti_cloud(const std::vector<char>& bytes) {
  if (bytes.size() % 16 != 0) {
    throw Error(ErrorCode::kMalformedFile, "velodyne payload size " + std::to_string(bytes.size()) +
                                               " is not a multiple of 16");
  }
  auto read_f32 = [&](std::size_t off) {
    std::uint32_t u = 0;
    for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<std::uint8_t>(bytes[off + b]);
    return std::bit_cast<float>(u);
  };
  PointCloud pc;
  const std::size_t n = bytes.size() / 16;
  pc.points.reserve(n);
  pc.intensity.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = i * 16;
    pc.push_back({read_f32(o), read_f32(o + 4), read_f32(o + 8)}, read_f32(o + 12));
  }
  return pc;
}

inline std::vector<char> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline PointCloud load_kitti_cloud(const fs::path& path) {
  try {
    return decode_kitti_cloud(read_file_bytes(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kMalformedFile) {
      throw Error(ErrorCode::kMalformedFile, path.string() + ": " + e.what());
    }
    throw;
  }
}

/// Writes points as float32 quadruples; values are rounded to float.
inline void save_kitti_cloud(const fs::path& path, const PointCloud& pc) {
  std::vector<char> bytes(pc.size() * 16);
  auto put = [&](std::size_t off, float f) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) bytes[off + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
  };
  for (std::size_t i = 0; i < pc.size(); ++i) {
    put(i * 16, static_cast<float>(pc.points[i].x()));
    put(i * 16 + 4, static_cast<float>(pc.points[i].y()));
    put(i * 16 + 8, static_cast<float>(pc.points[i].z()));
    put(i * 16 + 12, static_cast<float>(pc.intensity[i]));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct KittiCalib {
  CameraIntrinsics intrinsics;
  SE3Transform lidar_to_camera;  // velodyne -> rectified camera 2
};

inline std::map<std::string, std::vector<double>> parse_calib_rows(std::istream& in) {
  std::map<std::string, std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::istringstream values(line.substr(colon + 1));
    std::vector<double> v;
    double x;
    while (values >> x) v.push_back(x);
    rows[line.substr(0, colon)] = std::move(v);
  }
  return rows;
}

/// P2 supplies the intrinsics and the camera-2 baseline, which is folded
/// into Tr so the result maps velodyne points into the camera-2 frame.
inline KittiCalib parse_kitti_calib(std::istream& in) {
  auto rows = parse_calib_rows(in);
  auto get = [&](const std::string& key) -> const std::vector<double>& {
    auto it = rows.find(key);
    if (it == rows.end()) throw Error(ErrorCode::kMalformedCalib, "missing '" + key + ":' row");
    if (it->second.size() != 12) {
      throw Error(ErrorCode::kMalformedCalib, "row '" + key + ":' must hold 12 values");
    }
    return it->second;
  };
  const auto& p2 = get("P2");
  const auto& tr = get("Tr");
  KittiCalib calib;
  calib.intrinsics = {p2[0], p2[5], p2[2], p2[6]};
  if (!calib.intrinsics.is_valid()) throw Error(ErrorCode::kMalformedCalib, "non-positive focal length in P2");
  const double bz = p2[11];
  const double by = (p2[7] - calib.intrinsics.cy * bz) / calib.intrinsics.fy;
  const double bx = (p2[3] - calib.intrinsics.cx * bz) / calib.intrinsics.fx;
  SE3Transform velo_to_cam0;
  velo_to_cam0.rotation << tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10];
  velo_to_cam0.translation = Vec3(tr[3], tr[7], tr[11]);
  SE3Transform baseline;
  baseline.translation = Vec3(bx, by, bz);
  calib.lidar_to_camera = baseline * velo_to_cam0;
  return calib;
}

inline KittiCalib load_kitti_calib(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return parse_kitti_calib(in);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

/// Writes a minimal KITTI calib file with P2 = K [I | 0] and the given Tr.
inline void save_kitti_calib(const fs::path& path, const CameraIntrinsics& k, const SE3Transform& tr) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  char buf[64];
  auto row = [&](const char* key, const std::array<double, 12>& v) {
    out << key << ':';
    for (double x : v) {
      std::snprintf(buf, sizeof(buf), " %.12e", x);
      out << buf;
    }
    out << '\n';
  };
  row("P2", {k.fx, 0, k.cx, 0, 0, k.fy, k.cy, 0, 0, 0, 1, 0});
  const Mat3& r = tr.rotation;
  const Vec3& t = tr.translation;
  row("Tr", {r(0, 0), r(0, 1), r(0, 2), t.x(), r(1, 0), r(1, 1), r(1, 2), t.y(), r(2, 0), r(2, 1), r(2, 2), t.z()});
}

struct KittiFramePaths {
  fs::path cloud;
  fs::path image;
  fs::path calib;
};

/// sequences/<NN>/{velodyne/<FFFFFF>.bin, image_2/<FFFFFF>.png, calib.txt}.
inline KittiFramePaths kitti_frame_paths(const fs::path& root, int sequence, int frame) {
  char seq[8], idx[16];
  std::snprintf(seq, sizeof(seq), "%02d", sequence);
  std::snprintf(idx, sizeof(idx), "%06d", frame);
  const fs::path base = root / "sequences" / seq;
  return {base / "velodyne" / (std::string(idx) + ".bin"), base / "image_2" / (std::string(idx) + ".png"),
          base / "calib.txt"};
}

/// Sequence-disjoint split of KITTI odometry: 01-19 train, 20-21 val, 00 test.
inline std::vector<int> kitti_split_sequences(const std::string& split) {
  std::vector<int> seqs;
  if (split == "train") {
    for (int s = 1; s <= 19; ++s) seqs.push_back(s);
  } else if (split == "val") {
    seqs = {20, 21};
  } else if (split == "test") {
    seqs = {0};
  } else {
    throw Error(ErrorCode::kUsage, "unknown KITTI split '" + split + "' (train|val|test)");
  }
  return seqs;
}

inline Frame load_frame(const fs::path& image, const fs::path& cloud, const fs::path& calib) {
  Frame f;
  f.image = read_png(image);
  f.cloud = load_kitti_cloud(cloud);
  const KittiCalib c = load_kitti_calib(calib);
  f.intrinsics = c.intrinsics;
  f.lidar_to_camera = c.lidar_to_camera;
  return f;
}

// ---------------------------------------------------------------------------
// Camera preprocessing

/// Zero-pads bottom/right to the padded size, then bilinearly resizes to the
/// target (half-pixel centers) and rescales the intrinsics to match.
inline std::pair<CameraImage, CameraIntrinsics> preprocess_camera(const Image8& raw, const PreprocessConfig& cfg,
                                                                  const CameraIntrinsics& k) {
  const Resolution pad = cfg.padded, tgt = cfg.target;
  if (raw.width > pad.width || raw.height > pad.height) {
    throw Error(ErrorCode::kResolutionMismatch, "image " + std::to_string(raw.width) + "x" +
                                                    std::to_string(raw.height) + " exceeds padded size " +
                                                    std::to_string(pad.width) + "x" + std::to_string(pad.height));
  }
  if (tgt.width <= 0 || tgt.height <= 0) throw Error(ErrorCode::kConfig, "target resolution must be positive");
  const double sx = static_cast<double>(tgt.width) / pad.width;
  const double sy = static_cast<double>(tgt.height) / pad.height;

  auto padded_at = [&](int x, int y, int c) -> double {
    if (x >= raw.width || y >= raw.height) return 0.0;
    return raw.channels == 1 ? raw.at(x, y, 0) : raw.at(x, y, c);
  };
  struct Tap {
    int i0, i1;
    double l;
  };
  auto taps = [](int out_n, int in_n, double scale) {
    std::vector<Tap> t(static_cast<std::size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      const double src = std::clamp((o + 0.5) / scale - 0.5, 0.0, static_cast<double>(in_n - 1));
      const int i0 = static_cast<int>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in_n - 1), src - i0};
    }
    return t;
  };
  const auto tx = taps(tgt.width, pad.width, sx);
  const auto ty = taps(tgt.height, pad.height, sy);

  CameraImage cam{tgt.width, tgt.height, std::vector<float>(static_cast<std::size_t>(3) * tgt.width * tgt.height)};
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < tgt.height; ++y) {
      const Tap& a = ty[y];
      for (int x = 0; x < tgt.width; ++x) {
        const Tap& b = tx[x];
        const double top = padded_at(b.i0, a.i0, c) * (1 - b.l) + padded_at(b.i1, a.i0, c) * b.l;
        const double bot = padded_at(b.i0, a.i1, c) * (1 - b.l) + padded_at(b.i1, a.i1, c) * b.l;
        cam.data[(static_cast<std::size_t>(c) * tgt.height + y) * tgt.width + x] =
            static_cast<float>((top * (1 - a.l) + bot * a.l) / 255.0);
      }
    }
  }
  const CameraIntrinsics scaled{k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy};
  return {std::move(cam), scaled};
}

inline PreparedFrame prepare_frame(const Frame& frame, const PreprocessConfig& cfg) {
  auto [cam, k] = preprocess_camera(frame.image, cfg, frame.intrinsics);
  return {std::move(cam), k, frame.cloud, frame.lidar_to_camera};
}

// ---------------------------------------------------------------------------
// LiDAR image rendering

/// Z-buffered projection into a width x height raster. Points behind the
/// camera or outside the raster are dropped; the nearest point wins a pixel
/// (first one on exact ties). Pixel = nearest integer of (u, v).
inline LidarImage render_lidar_image(const PointCloud& pc, const CameraIntrinsics& k, const SE3Transform& t,
                                     int width, int height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::kConfig, "render size must be positive");
  LidarImage img;
  img.width = width;
  img.height = height;
  const std::size_t n = static_cast<std::size_t>(width) * height;
  img.depth.assign(n, 0.0f);
  img.intensity.assign(n, 0.0f);
  img.mask.assign(n, 0);
  std::vector<double> zbuf(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!(t.apply(pc.points[i]).z() > 1e-9)) continue;
    const Projection p = project_point(pc.points[i], k, t);
    const double px = std::floor(p.u + 0.5), py = std::floor(p.v + 0.5);
    if (px < 0 || py < 0 || px >= width || py >= height) continue;
    const std::size_t idx = static_cast<std::size_t>(py) * width + static_cast<std::size_t>(px);
    if (p.depth < zbuf[idx]) {
      zbuf[idx] = p.depth;
      img.depth[idx] = static_cast<float>(std::min(p.depth / kDepthNormalization, 1.0));
      img.intensity[idx] = static_cast<float>(pc.intensity[i]);
      img.mask[idx] = 1;
    }
  }
  return img;
}

/// Largest pixel shift of points visible under `lidar_to_camera` when the
/// extrinsic is replaced by deviation * lidar_to_camera.
inline double max_projection_displacement(const PointCloud& pc, const CameraIntrinsics& k,
                                          const SE3Transform& lidar_to_camera, const SE3Transform& deviation,
                                          int width, int height) {
  const SE3Transform moved = deviation * lidar_to_camera;
  double worst = 0.0;
  for (const Vec3& p : pc.points) {
    if (!(lidar_to_camera.apply(p).z() > 1e-9) || !(moved.apply(p).z() > 1e-9)) continue;
    const Projection a = project_point(p, k, lidar_to_camera);
    if (a.u < 0 || a.v < 0 || a.u >= width || a.v >= height) continue;
    const Projection b = project_point(p, k, moved);
    worst = std::max(worst, std::hypot(b.u - a.u, b.v - a.v));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Sample assembly

/// SplitMix64 mix of (base, a, b); used to give every sample its own stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ (b * 0xd6e8feb86659fd93ull));
}

/// T_init = deviation * T_LC; the LiDAR image is rendered with T_init at the
/// camera's preprocessed resolution.
inline CalibrationSample make_sample(const PreparedFrame& frame, const DeviationRange& range, std::uint64_t seed) {
  CalibrationSample s;
  s.t_gt = sample_deviation(range, seed);
  s.t_init = s.t_gt * frame.lidar_to_camera;
  s.camera = frame.camera;
  s.cloud = frame.cloud;
  s.intrinsics = frame.intrinsics;
  s.lidar = render_lidar_image(s.cloud, s.intrinsics, s.t_init, frame.camera.width, frame.camera.height);
  return s;
}

inline CalibrationSample make_sample(const Frame& frame, const PreprocessConfig& cfg, const DeviationRange& range,
                                     std::uint64_t seed) {
  return make_sample(prepare_frame(frame, cfg), range, seed);
}

}  // namespace calibformer
