// Point-cloud overlays on the camera image for visual inspection.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "calibformer/geometry.hpp"
#include "calibformer/image.hpp"

namespace calibformer {

// Hue runs from red (near) to blue (far); depths past kOverlayMaxDepth saturate.
inline constexpr double kOverlayMaxDepth = 40.0;
inline constexpr double kOverlayMaxHueDeg = 240.0;
inline constexpr int kOverlayDotRadius = 1;

inline std::array<std::uint8_t, 3> depth_color(double depth) {
  const double h = std::clamp(depth / kOverlayMaxDepth, 0.0, 1.0) * kOverlayMaxHueDeg / 60.0;
  const int sector = std::min(static_cast<int>(h), 5);
  const double f = h - sector;
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = 1; g = f; break;
    case 1: r = 1 - f; g = 1; break;
    case 2: g = 1; b = f; break;
    case 3: g = 1 - f; b = 1; break;
    default: r = f; b = 1; break;
  }
  auto to8 = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  return {to8(r), to8(g), to8(b)};
}

inline Image8 grayscale(const Image8& rgb) {
  Image8 out(rgb.width, rgb.height, 3);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      const double l = 0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) + 0.114 * rgb.at(x, y, 2);
      const auto v = static_cast<std::uint8_t>(std::lround(l));
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = v;
    }
  }
  return out;
}

/// Projects the cloud with `t` and draws depth-coloured dots over a grayscale
/// copy of `image`; nearer points are drawn last.
inline Image8 render_overlay(const Image8& image, const PointCloud& cloud, const CameraIntrinsics& k,
                             const SE3Transform& t) {
  Image8 out = grayscale(image);
  std::vector<Projection> proj;
  proj.reserve(cloud.size());
  for (const Vec3& p : cloud.points) {
    const Projection pr = project_point(p, k, t);
    if (pr.depth > 0 && pr.u >= 0 && pr.v >= 0 && pr.u < image.width && pr.v < image.height) proj.push_back(pr);
  }
  std::stable_sort(proj.begin(), proj.end(), [](const Projection& a, const Projection& b) { return a.depth > b.depth; });
  for (const Projection& pr : proj) {
    const auto color = depth_color(pr.depth);
    const int cx = static_cast<int>(pr.u), cy = static_cast<int>(pr.v);
    for (int y = std::max(0, cy - kOverlayDotRadius); y <= std::min(image.height - 1, cy + kOverlayDotRadius); ++y) {
      for (int x = std::max(0, cx - kOverlayDotRadius); x <= std::min(image.width - 1, cx + kOverlayDotRadius); ++x) {
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = color[c];
      }
    }
  }
  return out;
}

/// Fraction of pixels that differ in any channel.
inline double differing_pixel_fraction(const Image8& a, const Image8& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) return 1.0;
  std::size_t diff = 0;
  const std::size_t n = static_cast<std::size_t>(a.width) * a.height;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < a.channels; ++c) {
      if (a.data[i * a.channels + c] != b.data[i * b.channels + c]) {
        ++diff;
        break;
      }
    }
  }
  return n ? static_cast<double>(diff) / static_cast<double>(n) : 0.0;
}

}  // namespace calibformer
