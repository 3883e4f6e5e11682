// Copyright 2026 The berrypose Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/// \file
/// \brief Rotations, poses, pinhole projection, oriented boxes, the discrete
/// symmetry orbit of a box, exact oriented 3D IoU and pose-error metrics.
///
/// Frames: the camera frame is x right, y down, z forward. A box's local frame
/// has its symmetry axis along +y; `Size3D::h` spans local y, `w` local x and
/// `l` local z.

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "berrypose/error.hpp"

namespace berrypose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kDegPerRad = 180.0 / std::numbers::pi;

/// Unit quaternion stored as (w, x, y, z) with w >= 0.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}

  static Rotation from_wxyz(double w, double x, double y, double z) {
    return Rotation(Eigen::Quaterniond(w, x, y, z));
  }
  static Rotation from_quaternion(const Eigen::Quaterniond& q) { return Rotation(q); }
  static Rotation from_matrix(const Mat3& m) { return Rotation(Eigen::Quaterniond(m)); }
  static Rotation from_axis_angle(const Vec3& axis, double angle) {
    return Rotation(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized())));
  }
  /// Rotation about the box symmetry axis (local y).
  static Rotation about_symmetry_axis(double angle) {
    return from_axis_angle(Vec3::UnitY(), angle);
  }

  const Eigen::Quaterniond& quaternion() const noexcept { return q_; }
  double w() const noexcept { return q_.w(); }
  double x() const noexcept { return q_.x(); }
  double y() const noexcept { return q_.y(); }
  double z() const noexcept { return q_.z(); }
  Mat3 matrix() const { return q_.toRotationMatrix(); }

  Vec3 operator*(const Vec3& p) const { return q_ * p; }
  Rotation operator*(const Rotation& o) const { return Rotation(q_ * o.q_); }
  Rotation inverse() const { return Rotation(q_.conjugate()); }

  /// Geodesic angle to `o` in radians, in [0, pi].
  double angle_to(const Rotation& o) const {
    const Eigen::Quaterniond rel = q_.conjugate() * o.q_;
    return 2.0 * std::atan2(rel.vec().norm(), std::abs(rel.w()));
  }

 private:
  explicit Rotation(Eigen::Quaterniond q) : q_(std::move(q)) {
    q_.normalize();
    // q and -q encode the same rotation; pick the one with w >= 0 (ties broken
    // on the first nonzero vector component) so serialization is stable.
    const double c[4] = {q_.w(), q_.x(), q_.y(), q_.z()};
    for (double v : c) {
      if (v > 0.0) break;
      if (v < 0.0) {
        q_.coeffs() *= -1.0;
        break;
      }
    }
  }

  Eigen::Quaterniond q_;
};

/// Rigid transform from a local frame into the camera frame.
struct Pose {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }
  Pose inverse() const {
    const Rotation inv = rotation.inverse();
    return {inv, -(inv * translation)};
  }
};

/// Metric box extent: h along the symmetry axis, w and l across it.
struct Size3D {
  double h = 0.0;
  double w = 0.0;
  double l = 0.0;

  bool valid() const noexcept { return h > 0.0 && w > 0.0 && l > 0.0; }
  double volume() const noexcept { return h * w * l; }
  /// Extent along local x, y, z.
  Vec3 xyz() const { return {w, h, l}; }
  double diagonal() const { return std::sqrt(h * h + w * w + l * l); }
};

struct OrientedBox3D {
  Pose pose;
  Size3D size;
};

/// Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("intrinsics: fx, fy must be positive");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height))
      throw ConfigError("intrinsics: principal point must lie inside the image");
  }
  bool contains(const Vec2& px) const {
    return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height;
  }
  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

// ---------------------------------------------------------------------------
// Corner convention
//
// Corner k (0..7) sits at local (sx*w/2, sy*h/2, sz*l/2) where sx, sy, sz are
// bits 0, 1, 2 of k (bit set = +, clear = -). The nine keypoints of a box are
// the center followed by corners 0..7.

inline constexpr int kNumCorners = 8;
inline constexpr int kNumKeypoints = 9;

using Corners = std::array<Vec3, kNumCorners>;
using Keypoints3D = std::array<Vec3, kNumKeypoints>;
using Keypoints2D = std::array<Vec2, kNumKeypoints>;

/// The 12 box edges: corner pairs differing in exactly one sign bit.
inline constexpr std::array<std::pair<int, int>, 12> kBoxEdges = {{
    {0, 1}, {2, 3}, {4, 5}, {6, 7},  // along x
    {0, 2}, {1, 3}, {4, 6}, {5, 7},  // along y
    {0, 4}, {1, 5}, {2, 6}, {3, 7},  // along z
}};

inline Vec3 corner_sign(int k) {
  return {(k & 1) ? 1.0 : -1.0, (k & 2) ? 1.0 : -1.0, (k & 4) ? 1.0 : -1.0};
}

/// Center + 8 corners of a box of `size` in its own frame.
inline Keypoints3D model_keypoints(const Size3D& size) {
  Keypoints3D pts;
  pts[0] = Vec3::Zero();
  const Vec3 half = 0.5 * size.xyz();
  for (int k = 0; k < kNumCorners; ++k) pts[k + 1] = corner_sign(k).cwiseProduct(half);
  return pts;
}

inline Corners box_corners(const OrientedBox3D& box) {
  const Keypoints3D local = model_keypoints(box.size);
  Corners out;
  for (int k = 0; k < kNumCorners; ++k) out[k] = box.pose.apply(local[k + 1]);
  return out;
}

inline Keypoints3D box_keypoints(const OrientedBox3D& box) {
  Keypoints3D pts = model_keypoints(box.size);
  for (auto& p : pts) p = box.pose.apply(p);
  return pts;
}

// ---------------------------------------------------------------------------
// Projection

inline constexpr double kMinDepth = 1e-6;

inline Vec2 project(const Vec3& p, const CameraIntrinsics& k) {
  if (!(p.z() > kMinDepth)) throw BehindCameraError("project: point has z <= 1e-6");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

inline std::vector<Vec2> project(std::span<const Vec3> pts, const CameraIntrinsics& k) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (const Vec3& p : pts) out.push_back(project(p, k));
  return out;
}

inline Keypoints2D project_keypoints(const OrientedBox3D& box, const CameraIntrinsics& k) {
  const Keypoints3D pts = box_keypoints(box);
  Keypoints2D out;
  for (int i = 0; i < kNumKeypoints; ++i) out[i] = project(pts[i], k);
  return out;
}

/// Pixel -> ray point at depth z (inverse of `project` for a known depth).
inline Vec3 back_project(const Vec2& px, double z, const CameraIntrinsics& k) {
  return {(px.x() - k.cx) / k.fx * z, (px.y() - k.cy) / k.fy * z, z};
}

// ---------------------------------------------------------------------------
// Symmetry orbit

/// Member i has rotation R * Ry(2*pi*i/n); translation and size are shared.
inline std::vector<OrientedBox3D> symmetry_expand(const OrientedBox3D& box, int n = 12) {
  if (n < 1) throw ConfigError("symmetry_expand: n must be >= 1");
  std::vector<OrientedBox3D> out;
  out.reserve(static_cast<std::size_t>(n));
  out.push_back(box);
  for (int i = 1; i < n; ++i) {
    OrientedBox3D m = box;
    m.pose.rotation =
        box.pose.rotation * Rotation::about_symmetry_axis(2.0 * std::numbers::pi * i / n);
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact oriented-box IoU

namespace detail {

struct HalfSpace {
  Vec3 normal;  // outward, unit
  double offset;
  double signed_distance(const Vec3& p) const { return normal.dot(p) - offset; }
};

using Polygon = std::vector<Vec3>;

inline std::array<HalfSpace, 6> box_halfspaces(const OrientedBox3D& b) {
  const Mat3 r = b.pose.rotation.matrix();
  const Vec3 half = 0.5 * b.size.xyz();
  std::array<HalfSpace, 6> hs;
  for (int axis = 0; axis < 3; ++axis) {
    for (int s = 0; s < 2; ++s) {
      const Vec3 n = (s ? 1.0 : -1.0) * r.col(axis);
      hs[2 * axis + s] = {n, n.dot(b.pose.translation) + half[axis]};
    }
  }
  return hs;
}

inline std::vector<Polygon> box_faces(const OrientedBox3D& b) {
  const Corners c = box_corners(b);
  std::vector<Polygon> faces;
  faces.reserve(6);
  for (int axis = 0; axis < 3; ++axis) {
    const int j = 1 << ((axis + 1) % 3);
    const int k = 1 << ((axis + 2) % 3);
    for (int s = 0; s < 2; ++s) {
      const int base = s ? (1 << axis) : 0;
      faces.push_back({c[base], c[base | j], c[base | j | k], c[base | k]});
    }
  }
  return faces;
}

/// Newell normal; its norm is twice the polygon area.
inline Vec3 newell(const Polygon& poly) {
  Vec3 n = Vec3::Zero();
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % poly.size()];
    n += a.cross(b);
  }
  return n;
}

/// Clips a convex polyhedron (list of ordered convex faces) by one halfspace
/// and closes the cut with a cap face.
inline std::vector<Polygon> clip_polyhedron(const std::vector<Polygon>& faces,
                                            const HalfSpace& hs, double eps) {
  std::vector<Polygon> out;
  out.reserve(faces.size() + 1);
  std::vector<Vec3> cap;
  for (const Polygon& f : faces) {
    Polygon clipped;
    clipped.reserve(f.size() + 2);
    for (std::size_t i = 0; i < f.size(); ++i) {
      const Vec3& p = f[i];
      const Vec3& q = f[(i + 1) % f.size()];
      const double dp = hs.signed_distance(p);
      const double dq = hs.signed_distance(q);
      const bool pin = dp <= eps;
      const bool qin = dq <= eps;
      if (pin) clipped.push_back(p);
      if (pin != qin) {
        const double t = std::clamp(dp / (dp - dq), 0.0, 1.0);
        const Vec3 x = p + t * (q - p);
        clipped.push_back(x);
        cap.push_back(x);
      }
    }
    if (clipped.size() >= 3) out.push_back(std::move(clipped));
  }
  if (cap.size() >= 3) {
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : cap) centroid += p;
    centroid /= static_cast<double>(cap.size());
    const Vec3 u = hs.normal.unitOrthogonal();
    const Vec3 v = hs.normal.cross(u);
    std::vector<std::pair<double, Vec3>> ang;
    ang.reserve(cap.size());
    for (const Vec3& p : cap) {
      const Vec3 d = p - centroid;
      ang.emplace_back(std::atan2(d.dot(v), d.dot(u)), p);
    }
    std::sort(ang.begin(), ang.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Polygon poly;
    for (const auto& [a, p] : ang) {
      if (poly.empty() || (poly.back() - p).norm() > eps) poly.push_back(p);
    }
    if (poly.size() >= 3 && (poly.front() - poly.back()).norm() <= eps) poly.pop_back();
    if (poly.size() >= 3) out.push_back(std::move(poly));
  }
  return out;
}

/// Volume of a closed convex polyhedron by summing face pyramids around an
/// interior point.
inline double convex_volume(const std::vector<Polygon>& faces) {
  Vec3 c = Vec3::Zero();
  std::size_t count = 0;
  for (const Polygon& f : faces) {
    for (const Vec3& p : f) c += p;
    count += f.size();
  }
  if (count == 0) return 0.0;
  c /= static_cast<double>(count);
  double vol = 0.0;
  for (const Polygon& f : faces) {
    const Vec3 n2a = newell(f);
    const double n = n2a.norm();
    if (n <= 0.0) continue;
    vol += 0.5 * n * std::abs((n2a / n).dot(f[0] - c)) / 3.0;
  }
  return vol;
}

}  // namespace detail

/// Intersection volume of two oriented boxes (exact up to rounding).
inline double box3d_intersection_volume(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double scale = std::max(a.size.diagonal(), b.size.diagonal()) +
                       (a.pose.translation - b.pose.translation).norm();
  const double eps = 1e-12 * std::max(scale, 1e-9);
  std::vector<detail::Polygon> faces = detail::box_faces(a);
  for (const detail::HalfSpace& hs : detail::box_halfspaces(b)) {
    faces = detail::clip_polyhedron(faces, hs, eps);
    if (faces.size() < 4) return 0.0;
  }
  return detail::convex_volume(faces);
}

inline double box3d_iou(const OrientedBox3D& a, const OrientedBox3D& b) {
  const double va = a.size.volume();
  const double vb = b.size.volume();
  if (!(va > 1e-18 && vb > 1e-18)) return 0.0;
  const double inter = std::min({box3d_intersection_volume(a, b), va, vb});
  const double iou = inter / (va + vb - inter);
  return std::clamp(iou, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Pose errors

struct PoseError {
  double translation = 0.0;   ///< meters
  double rotation_deg = 0.0;  ///< degrees, geodesic, in [0, 180]
};

inline PoseError pose_errors(const Pose& pred, const Pose& gt) {
  return {(pred.translation - gt.translation).norm(),
          std::clamp(pred.rotation.angle_to(gt.rotation) * kDegPerRad, 0.0, 180.0)};
}

/// Pose error against the closest member of the n-fold symmetry orbit of `gt`.
inline PoseError symmetric_pose_errors(const Pose& pred, const OrientedBox3D& gt, int n = 12) {
  PoseError best;
  bool first = true;
  for (const OrientedBox3D& m : symmetry_expand(gt, n)) {
    const PoseError e = pose_errors(pred, m.pose);
    if (first || e.rotation_deg < best.rotation_deg) best = e;
    first = false;
  }
  return best;
}

/// Max IoU of `pred` against the n-fold symmetry orbit of `gt`.
inline double symmetric_iou(const OrientedBox3D& pred, const OrientedBox3D& gt, int n = 12) {
  double best = 0.0;
  for (const OrientedBox3D& m : symmetry_expand(gt, n)) best = std::max(best, box3d_iou(pred, m));
  return best;
}

}  // namespace berrypose
