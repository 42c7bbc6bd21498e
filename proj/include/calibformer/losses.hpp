// Training objective: weighted smooth-L1 translation, geodesic rotation and
// point-cloud terms. Every term is written once over a generic scalar so the
// same code yields values (double) and exact derivatives (Dual) with respect
// to the network's raw pose outputs.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "calibformer/dataio.hpp"
#include "calibformer/geometry.hpp"

namespace calibformer {

inline constexpr int kPointLossCap = 4096;

struct LossWeights {
  double lambda_t = 1.0;
  double lambda_r = 1.0;
  double lambda_p = 0.1;  // see README

  bool is_valid() const {
    return lambda_t >= 0 && lambda_r >= 0 && lambda_p >= 0 && (lambda_t > 0 || lambda_r > 0 || lambda_p > 0);
  }
};

struct LossBreakdown {
  double total = 0;
  double translation = 0;
  double rotation = 0;
  double pointcloud = 0;
};

/// Translation in meters plus a unit quaternion, as produced by the heads.
struct PosePrediction {
  Vec3 translation = Vec3::Zero();
  Quaternion rotation;

  SE3Transform transform() const { return make_transform(rotation, translation); }
};

/// Forward-mode dual number with N derivative slots.
template <int N>
struct Dual {
  double v = 0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit promotion from constants
  static Dual variable(double value, int slot) {
    Dual r(value);
    r.d[slot] = 1.0;
    return r;
  }

  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a) {
    Dual r(-a.v);
    for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
    return r;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    const double inv = 1.0 / (b.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
    return r;
  }
  Dual& operator+=(const Dual& b) { return *this = *this + b; }

  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
};

// Scalar helpers shared by double and Dual. sqrt at 0 has derivative 0 here
// (subgradient choice); it only arises at an exact match.
inline double value_of(double x) { return x; }
template <int N>
double value_of(const Dual<N>& x) { return x.v; }

inline double sqrt_(double x) { return std::sqrt(x); }
template <int N>
Dual<N> sqrt_(const Dual<N>& x) {
  Dual<N> r(std::sqrt(x.v));
  const double g = r.v > 0 ? 0.5 / r.v : 0.0;
  for (int i = 0; i < N; ++i) r.d[i] = g * x.d[i];
  return r;
}

inline double abs_(double x) { return std::abs(x); }
template <int N>
Dual<N> abs_(const Dual<N>& x) { return x.v < 0 ? -x : x; }

inline double atan2_(double y, double x) { return std::atan2(y, x); }
template <int N>
Dual<N> atan2_(const Dual<N>& y, const Dual<N>& x) {
  Dual<N> r(std::atan2(y.v, x.v));
  const double den = x.v * x.v + y.v * y.v;
  if (den > 0) {
    for (int i = 0; i < N; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / den;
  }
  return r;
}

template <class T>
using Vec3T = std::array<T, 3>;
template <class T>
using QuatT = std::array<T, 4>;  // w, x, y, z

template <class T>
T smooth_l1(const T& x, double beta = 1.0) {
  const T a = abs_(x);
  if (value_of(a) < beta) return T(0.5) * a * a / T(beta);
  return a - T(0.5 * beta);
}

/// Sum over the 3 components of smooth-L1(pred - gt), beta = 1.
template <class T>
T translation_loss(const Vec3T<T>& t_gt, const Vec3T<T>& t_pred, double beta = 1.0) {
  T s(0.0);
  for (int i = 0; i < 3; ++i) s += smooth_l1(t_pred[i] - t_gt[i], beta);
  return s;
}

inline double translation_loss(const Vec3& t_gt, const Vec3& t_pred) {
  return translation_loss<double>({t_gt.x(), t_gt.y(), t_gt.z()}, {t_pred.x(), t_pred.y(), t_pred.z()});
}

/// 2 * atan2(|Im r|, |Re r|) with r = q_gt * conj(q_pred). The ratio does not
/// depend on either norm, so q_pred may be an unnormalized head output.
template <class T>
T rotation_loss(const QuatT<T>& a, const QuatT<T>& b) {
  const T bw = b[0], bx = -b[1], by = -b[2], bz = -b[3];
  const T rw = a[0] * bw - a[1] * bx - a[2] * by - a[3] * bz;
  // Grouped so that pairs cancelling at a == b are summed first: the
  // imaginary part is then exactly zero at the truth.
  const T rx = (a[1] * bw + a[0] * bx) + (a[2] * bz - a[3] * by);
  const T ry = (a[2] * bw + a[0] * by) + (a[3] * bx - a[1] * bz);
  const T rz = (a[3] * bw + a[0] * bz) + (a[1] * by - a[2] * bx);
  return T(2.0) * atan2_(sqrt_(rx * rx + ry * ry + rz * rz), abs_(rw));
}

inline double rotation_loss(const Quaternion& q_gt, const Quaternion& q_pred) {
  return rotation_loss<double>({q_gt.w, q_gt.x, q_gt.y, q_gt.z}, {q_pred.w, q_pred.x, q_pred.y, q_pred.z});
}

/// Rotation matrix (row-major) of a quaternion, normalized on the fly.
template <class T>
std::array<T, 9> rotation_matrix(const QuatT<T>& q) {
  const T n = sqrt_(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  const T w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  const T one(1.0), two(2.0);
  return {one - two * (y * y + z * z), two * (x * y - w * z),       two * (x * z + w * y),
          two * (x * y + w * z),       one - two * (x * x + z * z), two * (y * z - w * x),
          two * (x * z - w * y),       two * (y * z + w * x),       one - two * (x * x + y * y)};
}

/// Mean of ||T_gt^-1 T_pred p - p||, evaluated as ||(R_pred - R_gt) p + t_pred - t_gt||
/// (the outer R_gt^T does not change the norm).
template <class T>
T pointcloud_loss(const QuatT<T>& q_gt, const Vec3T<T>& t_gt, const QuatT<T>& q_pred, const Vec3T<T>& t_pred,
                  const std::vector<Vec3>& points) {
  if (points.empty()) throw Error(ErrorCode::kEmptyInput, "point cloud is empty");
  const auto rg = rotation_matrix(q_gt), rp = rotation_matrix(q_pred);
  std::array<T, 9> dr;
  for (int i = 0; i < 9; ++i) dr[i] = rp[i] - rg[i];
  const Vec3T<T> dt{t_pred[0] - t_gt[0], t_pred[1] - t_gt[1], t_pred[2] - t_gt[2]};
  T sum(0.0);
  for (const Vec3& p : points) {
    T sq(0.0);
    for (int r = 0; r < 3; ++r) {
      const T e = dr[3 * r] * T(p.x()) + dr[3 * r + 1] * T(p.y()) + dr[3 * r + 2] * T(p.z()) + dt[r];
      sq += e * e;
    }
    sum += sqrt_(sq);
  }
  return sum / T(static_cast<double>(points.size()));
}

inline double pointcloud_loss(const SE3Transform& t_gt, const SE3Transform& t_pred, const PointCloud& pc) {
  return point_cloud_distance(t_gt, t_pred, pc);
}

/// Up to `cap` points chosen without replacement by a seeded partial shuffle;
/// the whole cloud (in order) when it is small enough.
inline std::vector<Vec3> subsample_points(const PointCloud& pc, int cap, std::uint64_t seed) {
  if (pc.empty()) throw Error(ErrorCode::kEmptyInput, "point cloud is empty");
  const std::size_t n = pc.size(), k = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(cap, 1)));
  if (k == n) return pc.points;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<Vec3> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = pc.points[idx[i]];
  return out;
}

/// Ground truth for one sample in the form the loss consumes.
struct LossTarget {
  QuatT<double> q_gt;
  Vec3T<double> t_gt;
  std::vector<Vec3> points;
};

inline LossTarget make_loss_target(const SE3Transform& t_gt, const PointCloud& cloud, std::uint64_t seed,
                                   int cap = kPointLossCap) {
  const Quaternion q = rotmat_to_quat(t_gt.rotation);
  return {{q.w, q.x, q.y, q.z}, {t_gt.translation.x(), t_gt.translation.y(), t_gt.translation.z()},
          subsample_points(cloud, cap, seed)};
}

inline LossTarget make_loss_target(const CalibrationSample& s, std::uint64_t seed, int cap = kPointLossCap) {
  return make_loss_target(s.t_gt, s.cloud, seed, cap);
}

template <class T>
struct LossTerms {
  T total, translation, rotation, pointcloud;
};

template <class T>
LossTerms<T> total_loss(const Vec3T<T>& t_pred, const QuatT<T>& q_pred, const LossTarget& target,
                        const LossWeights& w) {
  if (!w.is_valid()) throw Error(ErrorCode::kConfig, "loss weights must be >= 0 with at least one > 0");
  const QuatT<T> qg{T(target.q_gt[0]), T(target.q_gt[1]), T(target.q_gt[2]), T(target.q_gt[3])};
  const Vec3T<T> tg{T(target.t_gt[0]), T(target.t_gt[1]), T(target.t_gt[2])};
  LossTerms<T> r{T(0.0), translation_loss(tg, t_pred), rotation_loss(qg, q_pred), T(0.0)};
  // The point term is skipped (not just zero-weighted) when disabled; it is the
  // expensive one.
  if (w.lambda_p > 0) r.pointcloud = pointcloud_loss(qg, tg, q_pred, t_pred, target.points);
  r.total = T(w.lambda_t) * r.translation + T(w.lambda_r) * r.rotation + T(w.lambda_p) * r.pointcloud;
  return r;
}

inline LossBreakdown total_loss(const PosePrediction& pred, const LossTarget& target, const LossWeights& w) {
  const auto r = total_loss<double>({pred.translation.x(), pred.translation.y(), pred.translation.z()},
                                    {pred.rotation.w, pred.rotation.x, pred.rotation.y, pred.rotation.z}, target, w);
  return {r.total, r.translation, r.rotation, r.pointcloud};
}

/// Full-cloud variant (no subsampling) against a sample's ground truth.
inline LossBreakdown total_loss(const PosePrediction& pred, const CalibrationSample& s, const LossWeights& w) {
  return total_loss(pred, make_loss_target(s.t_gt, s.cloud, 0, static_cast<int>(s.cloud.size())), w);
}

/// Loss at the raw head outputs (t: 3, unnormalized q: 4) and its gradient
/// with respect to those 7 numbers, in that order.
struct LossWithGradient {
  LossBreakdown loss;
  std::array<double, 7> grad{};
};

inline LossWithGradient loss_with_gradient(const std::array<double, 7>& raw, const LossTarget& target,
                                           const LossWeights& w) {
  using D = Dual<7>;
  Vec3T<D> t;
  QuatT<D> q;
  for (int i = 0; i < 3; ++i) t[i] = D::variable(raw[i], i);
  for (int i = 0; i < 4; ++i) q[i] = D::variable(raw[3 + i], 3 + i);
  const auto r = total_loss<D>(t, q, target, w);
  LossWithGradient out;
  out.loss = {r.total.v, r.translation.v, r.rotation.v, r.pointcloud.v};
  out.grad = r.total.d;
  return out;
}

}  // namespace calibformer
