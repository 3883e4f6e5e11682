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

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "berrypose/geometry.hpp"
#include "test_support.hpp"

using namespace berrypose;
using namespace berrypose::testing;
using Catch::Approx;

TEST_CASE("rotation invariants", "[geometry]") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    const Rotation r = random_rotation(rng);
    const double norm = std::sqrt(r.w() * r.w() + r.x() * r.x() + r.y() * r.y() + r.z() * r.z());
    REQUIRE(norm == Approx(1.0).margin(1e-9));
    REQUIRE(r.w() >= 0.0);
    const Mat3 m = r.matrix();
    REQUIRE((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-7);
    REQUIRE(m.determinant() == Approx(1.0).margin(1e-7));
  }
  // -q canonicalizes to q.
  const Rotation a = Rotation::from_wxyz(-0.5, 0.5, -0.5, 0.5);
  REQUIRE(a.w() == Approx(0.5));
  REQUIRE(a.x() == Approx(-0.5));
}

TEST_CASE("box_corners", "[geometry]") {
  SECTION("identity pose, size 2 -> corners at +-1") {
    const OrientedBox3D b{{}, {2.0, 2.0, 2.0}};
    const Corners c = box_corners(b);
    std::set<std::tuple<int, int, int>> seen;
    for (const Vec3& p : c) {
      for (int i = 0; i < 3; ++i) REQUIRE(std::abs(p[i]) == Approx(1.0));
      seen.insert({int(p.x()), int(p.y()), int(p.z())});
    }
    REQUIRE(seen.size() == 8);
  }
  SECTION("unit cube at z=1, corner 0") {
    OrientedBox3D b{{}, {1.0, 1.0, 1.0}};
    b.pose.translation = {0.0, 0.0, 1.0};
    const Vec3 c0 = box_corners(b)[0];
    REQUIRE(c0.x() == Approx(-0.5));
    REQUIRE(c0.y() == Approx(-0.5));
    REQUIRE(c0.z() == Approx(0.5));
  }
  SECTION("sign-bit order: bit0 -> x (w), bit1 -> y (h), bit2 -> z (l)") {
    const OrientedBox3D b{{}, {4.0, 2.0, 6.0}};  // h=4 w=2 l=6
    const Corners c = box_corners(b);
    REQUIRE(c[1].isApprox(Vec3(1.0, -2.0, -3.0)));
    REQUIRE(c[2].isApprox(Vec3(-1.0, 2.0, -3.0)));
    REQUIRE(c[4].isApprox(Vec3(-1.0, -2.0, 3.0)));
    REQUIRE(c[7].isApprox(Vec3(1.0, 2.0, 3.0)));
  }
  SECTION("mean of corners equals translation") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 100; ++i) {
      const OrientedBox3D b = random_box(rng, 5.0);
      Vec3 sum = Vec3::Zero();
      for (const Vec3& p : box_corners(b)) sum += p;
      REQUIRE((sum / 8.0 - b.pose.translation).norm() < 1e-9);
    }
  }
  SECTION("edges connect corners differing in one bit") {
    for (auto [a, b] : kBoxEdges) REQUIRE(std::popcount(unsigned(a ^ b)) == 1);
  }
}

TEST_CASE("project", "[geometry]") {
  const CameraIntrinsics k{100.0, 100.0, 50.0, 50.0, 100, 100};
  REQUIRE(project(Vec3(0, 0, 1), k).isApprox(Vec2(50, 50)));
  REQUIRE(project(Vec3(0.5, 0, 1), k).isApprox(Vec2(100, 50)));
  REQUIRE_THROWS_AS(project(Vec3(0, 0, 0), k), BehindCameraError);
  REQUIRE_THROWS_AS(project(Vec3(0, 0, -1), k), BehindCameraError);

  std::mt19937_64 rng(3);
  const CameraIntrinsics cam = test_camera();
  const OrientedBox3D b = random_visible_box(rng, cam);
  const Corners c = box_corners(b);
  const std::vector<Vec2> batch = project(std::span<const Vec3>(c.data(), c.size()), cam);
  for (int i = 0; i < 8; ++i) {
    const Vec2 loop(cam.fx * c[i].x() / c[i].z() + cam.cx, cam.fy * c[i].y() / c[i].z() + cam.cy);
    REQUIRE((batch[i] - loop).norm() < 1e-12);
  }
}

TEST_CASE("intrinsics validation", "[geometry]") {
  REQUIRE_NOTHROW(test_camera().validate());
  REQUIRE_THROWS_AS((CameraIntrinsics{0, 1, 1, 1, 2, 2}.validate()), ConfigError);
  REQUIRE_THROWS_AS((CameraIntrinsics{1, 1, 3, 1, 2, 2}.validate()), ConfigError);
}

TEST_CASE("symmetry_expand", "[geometry]") {
  std::mt19937_64 rng(5);
  const OrientedBox3D b = random_box(rng);
  SECTION("n = 1 returns the input") {
    const auto orbit = symmetry_expand(b, 1);
    REQUIRE(orbit.size() == 1);
    REQUIRE(orbit[0].pose.rotation.quaternion().coeffs() == b.pose.rotation.quaternion().coeffs());
  }
  SECTION("i = 6 of 12 is a half turn about the symmetry axis") {
    const auto orbit = symmetry_expand(b, 12);
    REQUIRE(orbit.size() == 12);
    REQUIRE(orbit[6].pose.rotation.angle_to(b.pose.rotation) * kDegPerRad == Approx(180.0));
    const Vec3 axis_a = b.pose.rotation.matrix().col(1);
    const Vec3 axis_b = orbit[6].pose.rotation.matrix().col(1);
    REQUIRE((axis_a - axis_b).norm() < 1e-12);
    REQUIRE(orbit[6].pose.translation == b.pose.translation);
  }
  SECTION("w = l: members i and i+n/2 have equal corner sets") {
    OrientedBox3D sq = b;
    sq.size.l = sq.size.w;
    const auto orbit = symmetry_expand(sq, 12);
    for (int i = 0; i < 6; ++i) {
      const Corners a = box_corners(orbit[i]);
      const Corners c = box_corners(orbit[i + 6]);
      for (const Vec3& p : a) {
        double best = 1e9;
        for (const Vec3& q : c) best = std::min(best, (p - q).norm());
        REQUIRE(best < 1e-9);
      }
    }
  }
  SECTION("translation and size preserved; center pixel shared") {
    const CameraIntrinsics cam = test_camera();
    const OrientedBox3D vb = random_visible_box(rng, cam);
    const Vec2 c0 = project(vb.pose.translation, cam);
    for (const auto& m : symmetry_expand(vb, 12)) {
      REQUIRE(m.pose.translation == vb.pose.translation);
      REQUIRE(m.size.h == vb.size.h);
      REQUIRE(m.size.w == vb.size.w);
      REQUIRE(m.size.l == vb.size.l);
      REQUIRE(project_keypoints(m, cam)[0] == c0);
    }
  }
  REQUIRE_THROWS_AS(symmetry_expand(b, 0), ConfigError);
}

TEST_CASE("box3d_iou analytic cases", "[geometry][iou]") {
  const OrientedBox3D unit{{}, {1.0, 1.0, 1.0}};
  REQUIRE(box3d_iou(unit, unit) == Approx(1.0).margin(1e-12));

  OrientedBox3D far = unit;
  far.pose.translation = {3.0, 0.0, 0.0};
  REQUIRE(box3d_iou(unit, far) == 0.0);

  OrientedBox3D half = unit;
  half.pose.translation = {0.5, 0.0, 0.0};
  REQUIRE(box3d_iou(unit, half) == Approx(1.0 / 3.0).margin(1e-12));

  OrientedBox3D flat = unit;
  flat.size.h = 0.0;
  REQUIRE(box3d_iou(flat, unit) == 0.0);

  // A box nested inside another: IoU = small / big.
  OrientedBox3D inner{{}, {0.5, 0.5, 0.5}};
  inner.pose.rotation = Rotation::from_axis_angle(Vec3(1, 1, 0), 0.3);
  REQUIRE(box3d_iou(unit, inner) == Approx(0.125).margin(1e-12));

  // 45 degree rotation about y of a unit cube: octagonal prism overlap.
  OrientedBox3D rot = unit;
  rot.pose.rotation = Rotation::about_symmetry_axis(std::numbers::pi / 4);
  const double inter = 2.0 * (std::sqrt(2.0) - 1.0);  // regular octagon area, height 1
  REQUIRE(box3d_iou(unit, rot) == Approx(inter / (2.0 - inter)).margin(1e-12));
}

TEST_CASE("box3d_iou matches Monte Carlo", "[geometry][iou]") {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 6; ++i) {
    const OrientedBox3D a = random_box(rng, 0.3);
    const OrientedBox3D b = random_box(rng, 0.3);
    const double exact = box3d_iou(a, b);
    const MonteCarloIoU mc = monte_carlo_iou(a, b, 1'000'000, rng);
    INFO("pair " << i << " exact " << exact << " mc " << mc.iou);
    REQUIRE(std::abs(exact - mc.iou) < 2e-3);
  }
}

TEST_CASE("box3d_iou symmetry and rigid invariance", "[geometry][iou]") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 100; ++i) {
    OrientedBox3D a = random_box(rng, 0.4);
    OrientedBox3D b = random_box(rng, 0.4);
    const double ab = box3d_iou(a, b);
    REQUIRE(ab >= 0.0);
    REQUIRE(ab <= 1.0);
    REQUIRE(box3d_iou(b, a) == Approx(ab).margin(1e-6));
    REQUIRE(box3d_iou(a, a) == Approx(1.0).margin(1e-9));
    const Pose g{random_rotation(rng), Vec3(uniform(rng, -2, 2), uniform(rng, -2, 2), 1.0)};
    a.pose = g * a.pose;
    b.pose = g * b.pose;
    REQUIRE(box3d_iou(a, b) == Approx(ab).margin(1e-6));
  }
}

TEST_CASE("pose_errors", "[geometry]") {
  Pose p;
  p.translation = {0.1, 0.2, 0.5};
  auto e = pose_errors(p, p);
  REQUIRE(e.translation == 0.0);
  REQUIRE(e.rotation_deg == 0.0);

  Pose q = p;
  q.translation.x() += 0.01;
  REQUIRE(pose_errors(q, p).translation == Approx(0.01).margin(1e-15));

  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vec3 axis(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Pose r = p;
    r.rotation = p.rotation * Rotation::from_axis_angle(axis, std::numbers::pi / 2);
    REQUIRE(pose_errors(r, p).rotation_deg == Approx(90.0).margin(1e-9));
  }

  SECTION("geodesic triangle inequality") {
    for (int i = 0; i < 100; ++i) {
      const Pose a{random_rotation(rng), {}};
      const Pose b{random_rotation(rng), {}};
      const Pose c{random_rotation(rng), {}};
      const double ab = pose_errors(a, b).rotation_deg;
      const double bc = pose_errors(b, c).rotation_deg;
      const double ac = pose_errors(a, c).rotation_deg;
      REQUIRE(ac <= ab + bc + 1e-9);
    }
  }
}

TEST_CASE("symmetric_pose_errors", "[geometry]") {
  std::mt19937_64 rng(17);
  const OrientedBox3D gt = random_box(rng);
  Pose pred = gt.pose;
  pred.rotation = gt.pose.rotation * Rotation::about_symmetry_axis(30.0 / kDegPerRad);
  REQUIRE(symmetric_pose_errors(pred, gt, 12).rotation_deg == Approx(0.0).margin(1e-6));

  pred.rotation = gt.pose.rotation * Rotation::about_symmetry_axis(15.0 / kDegPerRad);
  // Brute force over the 12 candidate angles about the axis.
  double brute = 1e9;
  for (int i = 0; i < 12; ++i) {
    const Rotation cand = gt.pose.rotation * Rotation::about_symmetry_axis(i * 30.0 / kDegPerRad);
    brute = std::min(brute, pred.rotation.angle_to(cand) * kDegPerRad);
  }
  REQUIRE(brute == Approx(15.0).margin(1e-9));
  REQUIRE(symmetric_pose_errors(pred, gt, 12).rotation_deg == Approx(brute).margin(1e-9));

  const Pose other{random_rotation(rng), Vec3(0.3, 0.1, 0.2)};
  const auto one = symmetric_pose_errors(other, gt, 1);
  const auto plain = pose_errors(other, gt.pose);
  REQUIRE(one.translation == plain.translation);
  REQUIRE(one.rotation_deg == plain.rotation_deg);
}
