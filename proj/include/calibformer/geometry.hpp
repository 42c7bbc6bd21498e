// SE(3), quaternion and pinhole projection math.
//
// Everything here is double precision and free of hidden state. Quaternions
// are Hamilton (w, x, y, z); Euler angles are intrinsic X-Y-Z
// (R = Rx(roll) * Ry(pitch) * Rz(yaw)).
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "calibformer/error.hpp"

namespace calibformer {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }

  static Quaternion from_axis_angle(const Vec3& axis, double angle_rad) {
    const Vec3 n = axis.normalized();
    const double s = std::sin(angle_rad / 2.0);
    return {std::cos(angle_rad / 2.0), n.x() * s, n.y() * s, n.z() * s};
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  Quaternion inverse() const {
    const double n2 = w * w + x * x + y * y + z * z;
    return {w / n2, -x / n2, -y / n2, -z / n2};
  }

  friend Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  }
};

/// Unit norm with w >= 0.
inline Quaternion canonicalize(const Quaternion& q) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorCode::kInvalidQuaternion, "cannot normalize zero or non-finite quaternion");
  }
  Quaternion out{q.w / n, q.x / n, q.y / n, q.z / n};
  return out.w < 0.0 ? -out : out;
}

struct SE3Transform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SE3Transform identity() { return {}; }

  static SE3Transform from_matrix(const Mat4& m) {
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  SE3Transform inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -rt * translation};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  friend SE3Transform operator*(const SE3Transform& a, const SE3Transform& b) {
    return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
  }

  /// Orthonormal rotation with det +1, finite translation.
  bool is_valid(double tol = 1e-6) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  bool is_valid() const { return fx > 0.0 && fy > 0.0; }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void push_back(const Vec3& p, double i) {
    points.push_back(p);
    intensity.push_back(i);
  }

  bool is_valid() const {
    if (points.size() != intensity.size()) return false;
    for (std::size_t k = 0; k < points.size(); ++k) {
      if (!points[k].allFinite() || !std::isfinite(intensity[k])) return false;
    }
    return true;
  }
};

/// Symmetric per-axis bounds: meters and degrees.
struct DeviationRange {
  double max_translation = 0.0;
  double max_rotation_deg = 0.0;

  bool is_valid() const { return max_translation >= 0.0 && max_rotation_deg >= 0.0; }
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

/// Pinhole projection of K * T * p. Depth may be negative; callers filter.
inline Projection project_point(const Vec3& p, const CameraIntrinsics& k, const SE3Transform& t) {
  const Vec3 c = t.apply(p);
  const double d = c.z();
  if (std::abs(d) < 1e-9) {
    throw Error(ErrorCode::kDegenerateDepth, "point projects with |depth| < 1e-9");
  }
  return {k.fx * c.x() / d + k.cx, k.fy * c.y() / d + k.cy, d};
}

inline Mat3 quat_to_rotmat(const Quaternion& q) {
  const double n = q.norm();
  if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-3) {
    throw Error(ErrorCode::kInvalidQuaternion, "quaternion norm deviates from 1 by more than 1e-3");
  }
  const double w = q.w / n, x = q.x / n, y = q.y / n, z = q.z / n;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Shepperd's method: pivots on the largest of trace and diagonal entries.
inline Quaternion rotmat_to_quat(const Mat3& r) {
  if (!r.allFinite()) throw Error(ErrorCode::kInvalidRotation, "non-finite rotation matrix");
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = r.determinant();
  if (det < 0.0 || ortho > 1e-3 || std::abs(det - 1.0) > 1e-3) {
    throw Error(ErrorCode::kInvalidRotation, "matrix is not a proper rotation");
  }
  const double tr = r.trace();
  Quaternion q;
  if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return canonicalize(q);
}

struct EulerAngles {
  double roll = 0.0;   // degrees, about X
  double pitch = 0.0;  // degrees, about Y
  double yaw = 0.0;    // degrees, about Z
  bool degenerate = false;
};

namespace detail {
inline double wrap_deg(double a) {
  if (a <= -180.0) a += 360.0;
  if (a > 180.0) a -= 360.0;
  return a;
}
}  // namespace detail

/// Intrinsic X-Y-Z angles in degrees. At gimbal lock yaw is pinned to 0.
inline EulerAngles rotmat_to_euler(const Mat3& r) {
  EulerAngles e;
  const double sp = std::clamp(r(0, 2), -1.0, 1.0);
  const double cp = std::hypot(r(0, 0), r(0, 1));
  // cos(pitch) below sin(1e-6 deg): |pitch| is 90 deg within 1e-6 deg.
  if (cp < std::sin(1e-6 * kDegToRad)) {
    e.degenerate = true;
    e.pitch = sp > 0 ? 90.0 : -90.0;
    e.yaw = 0.0;
    e.roll = detail::wrap_deg(std::atan2(r(2, 1), r(1, 1)) * kRadToDeg);
    return e;
  }
  e.pitch = std::atan2(sp, cp) * kRadToDeg;
  e.roll = detail::wrap_deg(std::atan2(-r(1, 2), r(2, 2)) * kRadToDeg);
  e.yaw = detail::wrap_deg(std::atan2(-r(0, 1), r(0, 0)) * kRadToDeg);
  return e;
}

inline EulerAngles quat_to_euler(const Quaternion& q) { return rotmat_to_euler(quat_to_rotmat(q)); }

inline Quaternion euler_to_quat(double roll_deg, double pitch_deg, double yaw_deg) {
  const Quaternion qx = Quaternion::from_axis_angle(Vec3::UnitX(), roll_deg * kDegToRad);
  const Quaternion qy = Quaternion::from_axis_angle(Vec3::UnitY(), pitch_deg * kDegToRad);
  const Quaternion qz = Quaternion::from_axis_angle(Vec3::UnitZ(), yaw_deg * kDegToRad);
  return canonicalize(qx * qy * qz);
}

/// Geodesic angle between the rotations, in [0, pi]; sign-invariant.
inline double quat_angular_distance(const Quaternion& q1, const Quaternion& q2) {
  const Quaternion r = q1 * q2.inverse();
  const double im = std::sqrt(r.x * r.x + r.y * r.y + r.z * r.z);
  return 2.0 * std::atan2(im, std::abs(r.w));
}

inline SE3Transform make_transform(const Quaternion& q, const Vec3& t) {
  return {quat_to_rotmat(q), t};
}

/// Calibrated extrinsic from the predicted deviation: T_pred^-1 * T_init.
inline SE3Transform compose_calibration(const SE3Transform& t_pred, const SE3Transform& t_init) {
  return t_pred.inverse() * t_init;
}

/// Uniform per-axis deviation. Draw order: tx, ty, tz, roll, pitch, yaw.
inline SE3Transform sample_deviation(const DeviationRange& range, std::uint64_t seed) {
  if (!range.is_valid()) throw Error(ErrorCode::kConfig, "negative deviation range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Vec3 t;
  for (int k = 0; k < 3; ++k) t[k] = unit(rng) * range.max_translation;
  const double roll = unit(rng) * range.max_rotation_deg;
  const double pitch = unit(rng) * range.max_rotation_deg;
  const double yaw = unit(rng) * range.max_rotation_deg;
  return {quat_to_rotmat(euler_to_quat(roll, pitch, yaw)), t};
}

/// Mean distance between p and T_gt^-1 * T_pred * p over the cloud.
inline double point_cloud_distance(const SE3Transform& t_gt, const SE3Transform& t_pred,
                                   const PointCloud& pc) {
  if (pc.empty()) throw Error(ErrorCode::kEmptyInput, "point cloud is empty");
  const SE3Transform rel = t_gt.inverse() * t_pred;
  double sum = 0.0;
  for (const Vec3& p : pc.points) sum += (rel.apply(p) - p).norm();
  return sum / static_cast<double>(pc.size());
}

}  // namespace calibformer
