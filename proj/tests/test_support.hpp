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

// Shared generators and brute-force oracles for the test binaries. Nothing in
// here calls into the code path it is used to check.

#pragma once

#include <cmath>
#include <random>

#include "berrypose/geometry.hpp"

namespace berrypose::testing {

inline Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Rotation::from_wxyz(n(rng), n(rng), n(rng), n(rng));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Size3D random_size(std::mt19937_64& rng, double lo = 0.5, double hi = 2.0) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

inline OrientedBox3D random_box(std::mt19937_64& rng, double spread = 1.0) {
  OrientedBox3D b;
  b.pose.rotation = random_rotation(rng);
  b.pose.translation = {uniform(rng, -spread, spread), uniform(rng, -spread, spread),
                        uniform(rng, -spread, spread)};
  b.size = random_size(rng);
  return b;
}

/// A strawberry-scale box in front of a camera, center projecting in-image.
inline OrientedBox3D random_visible_box(std::mt19937_64& rng, const CameraIntrinsics& k,
                                        double zmin = 0.25, double zmax = 0.8) {
  OrientedBox3D b;
  b.pose.rotation = random_rotation(rng);
  const double z = uniform(rng, zmin, zmax);
  const double u = uniform(rng, 0.1 * k.width, 0.9 * k.width);
  const double v = uniform(rng, 0.1 * k.height, 0.9 * k.height);
  b.pose.translation = {(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z};
  b.size = {uniform(rng, 0.02, 0.05), uniform(rng, 0.015, 0.04), uniform(rng, 0.015, 0.04)};
  return b;
}

inline bool inside_box(const OrientedBox3D& b, const Vec3& p) {
  // Rotation matrix transpose, written out instead of Pose::inverse.
  const Mat3 r = b.pose.rotation.matrix();
  const Vec3 local = r.transpose() * (p - b.pose.translation);
  return std::abs(local.x()) <= 0.5 * b.size.w && std::abs(local.y()) <= 0.5 * b.size.h &&
         std::abs(local.z()) <= 0.5 * b.size.l;
}

struct MonteCarloIoU {
  double iou;
  double sigma;  ///< one standard deviation of the estimate
};

/// Samples uniformly inside `a` and counts hits inside `b`.
inline MonteCarloIoU monte_carlo_iou(const OrientedBox3D& a, const OrientedBox3D& b,
                                     std::size_t samples, std::mt19937_64& rng) {
  const Mat3 r = a.pose.rotation.matrix();
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Vec3 local(u(rng) * a.size.w, u(rng) * a.size.h, u(rng) * a.size.l);
    if (inside_box(b, r * local + a.pose.translation)) ++hits;
  }
  const double va = a.size.volume();
  const double vb = b.size.volume();
  const double f = static_cast<double>(hits) / static_cast<double>(samples);
  const double sf = std::sqrt(std::max(f * (1.0 - f), 1.0 / samples) / samples);
  const double inter = f * va;
  const double iou = inter / (va + vb - inter);
  const double diou_df = va * (va + vb) / ((va + vb - inter) * (va + vb - inter));
  return {iou, diou_df * sf};
}

// Pinhole projection written out by hand.
inline Keypoints2D hand_projection(const OrientedBox3D& b, const CameraIntrinsics& k) {
  const Mat3 r = b.pose.rotation.matrix();
  Keypoints2D out;
  const double hx = b.size.w / 2, hy = b.size.h / 2, hz = b.size.l / 2;
  for (int i = 0; i < 9; ++i) {
    Vec3 p = Vec3::Zero();
    if (i > 0) {
      const int c = i - 1;
      p = Vec3(c & 1 ? hx : -hx, c & 2 ? hy : -hy, c & 4 ? hz : -hz);
    }
    const Vec3 x = r * p + b.pose.translation;
    out[i] = Vec2(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy);
  }
  return out;
}

inline CameraIntrinsics test_camera(int w = 416, int h = 416, double f = 500.0) {
  return {f, f, 0.5 * w, 0.5 * h, w, h};
}

}  // namespace berrypose::testing
