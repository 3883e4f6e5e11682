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
/// \brief Pose from the nine box keypoints.
///
/// Linear start from a normalized DLT on all nine points, then
/// Levenberg-Marquardt on the pixel reprojection error with a left-multiplied
/// rotation increment.

#pragma once

#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "berrypose/error.hpp"
#include "berrypose/geometry.hpp"

namespace berrypose {

struct Correspondences {
  std::array<Vec3, kNumKeypoints> model;  ///< box frame, meters
  Keypoints2D image;                      ///< pixels
};

inline Correspondences make_correspondences(const Keypoints2D& image, const Size3D& size) {
  return {model_keypoints(size), image};
}

struct PnPOptions {
  int max_iterations = 50;
  double rmse_tolerance = 1e-8;  ///< px, stop once an accepted step changes RMSE less
};

inline double reprojection_rmse(const Pose& pose, const Correspondences& c,
                                const CameraIntrinsics& k) {
  const Mat3 r = pose.rotation.matrix();
  double sum = 0.0;
  for (int i = 0; i < kNumKeypoints; ++i) {
    const Vec3 x = r * c.model[i] + pose.translation;
    const Vec2 u(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy);
    sum += (u - c.image[i]).squaredNorm();
  }
  return std::sqrt(sum / kNumKeypoints);
}

namespace detail {

inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

}  // namespace detail

/// Direct linear transform on normalized camera coordinates. Throws PnPError
/// when the system is degenerate.
inline Pose linear_pnp(const Correspondences& c, const CameraIntrinsics& k) {
  // Hartley-style conditioning of both point sets.
  Vec3 mc = Vec3::Zero();
  for (const Vec3& p : c.model) mc += p;
  mc /= kNumKeypoints;
  double ms = 0.0;
  for (const Vec3& p : c.model) ms += (p - mc).norm();
  ms /= kNumKeypoints;
  std::array<Vec2, kNumKeypoints> xn;
  Vec2 ic = Vec2::Zero();
  for (int i = 0; i < kNumKeypoints; ++i) {
    xn[i] = Vec2((c.image[i].x() - k.cx) / k.fx, (c.image[i].y() - k.cy) / k.fy);
    ic += xn[i];
  }
  ic /= kNumKeypoints;
  double is = 0.0;
  for (const Vec2& p : xn) is += (p - ic).norm();
  is /= kNumKeypoints;
  if (!(ms > 0.0) || !(is > 0.0) || !std::isfinite(ms) || !std::isfinite(is))
    throw PnPError("pnp: degenerate correspondences");
  const double sm = std::sqrt(3.0) / ms;
  const double si = std::sqrt(2.0) / is;

  Eigen::Matrix<double, 2 * kNumKeypoints, 12> a;
  for (int i = 0; i < kNumKeypoints; ++i) {
    const Vec3 p = (c.model[i] - mc) * sm;
    const Vec2 q = (xn[i] - ic) * si;
    const Eigen::Vector4d ph(p.x(), p.y(), p.z(), 1.0);
    a.row(2 * i) << ph.transpose(), Eigen::RowVector4d::Zero(), -q.x() * ph.transpose();
    a.row(2 * i + 1) << Eigen::RowVector4d::Zero(), ph.transpose(), -q.y() * ph.transpose();
  }
  Eigen::JacobiSVD<decltype(a)> svd(a, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 12, 1> v = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> pn;
  pn << v.segment<4>(0).transpose(), v.segment<4>(4).transpose(), v.segment<4>(8).transpose();

  // Undo conditioning: P = Ti^-1 * Pn * Tm.
  Eigen::Matrix3d ti_inv = Eigen::Matrix3d::Identity();
  ti_inv(0, 0) = ti_inv(1, 1) = 1.0 / si;
  ti_inv(0, 2) = ic.x();
  ti_inv(1, 2) = ic.y();
  Eigen::Matrix4d tm = Eigen::Matrix4d::Identity();
  tm.topLeftCorner<3, 3>() *= sm;
  tm.topRightCorner<3, 1>() = -sm * mc;
  Eigen::Matrix<double, 3, 4> p = ti_inv * pn * tm;

  Mat3 m = p.leftCols<3>();
  if (m.determinant() < 0.0) {
    p = -p;
    m = -m;
  }
  const Eigen::Vector3d sv = Eigen::JacobiSVD<Mat3>(m).singularValues();
  const double scale = sv.mean();
  if (!(scale > 0.0) || !std::isfinite(scale)) throw PnPError("pnp: degenerate linear solution");
  Pose pose;
  pose.rotation = Rotation::from_matrix(detail::nearest_rotation(m));
  pose.translation = p.col(3) / scale;
  // the re-orthogonalized rotation shifts the optimal translation; fix it by
  // least squares on the normalized coordinates
  const Mat3 r = pose.rotation.matrix();
  Eigen::Matrix<double, 2 * kNumKeypoints, 3> at;
  Eigen::Matrix<double, 2 * kNumKeypoints, 1> bt;
  for (int i = 0; i < kNumKeypoints; ++i) {
    const Vec3 rx = r * c.model[i];
    at.row(2 * i) << 1.0, 0.0, -xn[i].x();
    at.row(2 * i + 1) << 0.0, 1.0, -xn[i].y();
    bt(2 * i) = xn[i].x() * rx.z() - rx.x();
    bt(2 * i + 1) = xn[i].y() * rx.z() - rx.y();
  }
  pose.translation = at.colPivHouseholderQr().solve(bt);
  bool in_front = pose.translation.allFinite();
  for (const Vec3& x : c.model) in_front = in_front && (r * x + pose.translation).z() > 0.0;
  if (!in_front) {
    // noisy small boxes: place the center on its ray at the depth implied by
    // the ratio of model to image spread
    const double z = std::max(ms / is, 1e-3);
    pose.translation = Vec3(xn[0].x() * z, xn[0].y() * z, z);
    for (const Vec3& x : c.model)
      if (!((r * x + pose.translation).z() > 0.0))
        throw PnPError("pnp: no initialization in front of the camera");
  }
  return pose;
}

/// Linear start plus damped least-squares refinement. Throws PnPError on
/// divergence or a cheirality failure.
inline Pose solve_pnp(const Correspondences& c, const CameraIntrinsics& k,
                      const PnPOptions& opt = {}) {
  Pose pose = linear_pnp(c, k);
  Mat3 r = pose.rotation.matrix();
  Vec3 t = pose.translation;

  using Vec6 = Eigen::Matrix<double, 6, 1>;
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  auto residuals = [&](const Mat3& rr, const Vec3& tt, Eigen::Matrix<double, 18, 1>& res,
                       Eigen::Matrix<double, 18, 6>* jac) {
    for (int i = 0; i < kNumKeypoints; ++i) {
      const Vec3 rx = rr * c.model[i];
      const Vec3 x = rx + tt;
      if (!(x.z() > 0.0)) return false;
      const double iz = 1.0 / x.z();
      res(2 * i) = k.fx * x.x() * iz + k.cx - c.image[i].x();
      res(2 * i + 1) = k.fy * x.y() * iz + k.cy - c.image[i].y();
      if (jac) {
        Eigen::Matrix<double, 2, 3> dp;
        dp << k.fx * iz, 0.0, -k.fx * x.x() * iz * iz, 0.0, k.fy * iz, -k.fy * x.y() * iz * iz;
        jac->block<2, 3>(2 * i, 0) = dp * -detail::skew(rx);
        jac->block<2, 3>(2 * i, 3) = dp;
      }
    }
    return true;
  };

  Eigen::Matrix<double, 18, 1> res;
  Eigen::Matrix<double, 18, 6> jac;
  if (!residuals(r, t, res, &jac)) throw PnPError("pnp: linear solution behind camera");
  double cost = res.squaredNorm();
  double lambda = 1e-3;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Mat6 jtj = jac.transpose() * jac;
    const Vec6 g = jac.transpose() * res;
    bool accepted = false;
    while (lambda < 1e12) {
      Mat6 h = jtj;
      h.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Vec6 step = h.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      const Vec3 w = step.head<3>();
      const double angle = w.norm();
      const Mat3 dr = angle > 0.0 ? Eigen::AngleAxisd(angle, w / angle).toRotationMatrix()
                                  : Mat3::Identity();
      const Mat3 r_new = dr * r;
      const Vec3 t_new = t + step.tail<3>();
      Eigen::Matrix<double, 18, 1> res_new;
      if (residuals(r_new, t_new, res_new, nullptr) && res_new.squaredNorm() < cost) {
        const double new_cost = res_new.squaredNorm();
        const double change = std::abs(std::sqrt(cost / kNumKeypoints) -
                                       std::sqrt(new_cost / kNumKeypoints));
        r = detail::nearest_rotation(r_new);
        t = t_new;
        residuals(r, t, res, &jac);
        cost = res.squaredNorm();
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (change < opt.rmse_tolerance) it = opt.max_iterations;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  if (!std::isfinite(cost) || !r.allFinite() || !t.allFinite())
    throw PnPError("pnp: refinement diverged");
  for (const Vec3& x : c.model)
    if (!((r * x + t).z() > 0.0)) throw PnPError("pnp: solution behind camera");
  return Pose{Rotation::from_matrix(r), t};
}

inline Pose solve_pnp(const Keypoints2D& image, const Size3D& size, const CameraIntrinsics& k,
                      const PnPOptions& opt = {}) {
  return solve_pnp(make_correspondences(image, size), k, opt);
}

}  // namespace berrypose
