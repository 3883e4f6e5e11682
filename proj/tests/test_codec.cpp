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

#include "berrypose/codec.hpp"
#include "test_support.hpp"

using namespace berrypose;
using namespace berrypose::testing;
using Catch::Approx;

namespace {

const GridSpec kGrid = GridSpec::make(416, 416, 32, 5);
const MeanSize kMeans{0.034, 0.027, 0.027};
const AnchorSet kAnchors = AnchorSet::geometric(5, 12.0, 120.0);

InstanceKeypoints instance_at(const Vec2& center, double half = 10.0) {
  InstanceKeypoints inst;
  inst.pixels[0] = center;
  for (int k = 0; k < kNumCorners; ++k) {
    const Vec3 s = corner_sign(k);
    inst.pixels[k + 1] = center + Vec2(s.x() * half, s.y() * half * (s.z() > 0 ? 1.2 : 0.8));
  }
  inst.size = {kMeans.h, kMeans.w, kMeans.l};
  return inst;
}

/// Sets the confidence logit of responsible slots high and all others low.
GridTensor<double> with_confidence(const TargetTensor& t, const GridSpec& g) {
  GridTensor<double> raw = t.values;
  for (int i = 0; i < g.slots(); ++i) raw.slot(i)[kConfidence] = t.mask[i] ? 12.0 : -12.0;
  return raw;
}

}  // namespace

TEST_CASE("grid spec", "[codec]") {
  REQUIRE(kGrid.cells_x == 13);
  REQUIRE(kGrid.cells_y == 13);
  const GridSpec g = GridSpec::make(224, 160, 32, 3);
  REQUIRE(g.cells_x == 7);
  REQUIRE(g.cells_y == 5);
  REQUIRE_THROWS_AS(GridSpec::make(400, 416, 32, 5), ConfigError);
  REQUIRE_THROWS_AS(GridSpec::make(416, 416, 32, 0), ConfigError);
}

TEST_CASE("anchor set", "[codec]") {
  const AnchorSet a({{30, 30}, {10, 10}, {20, 5}});
  REQUIRE(a[0].area() <= a[1].area());
  REQUIRE(a[1].area() <= a[2].area());
  REQUIRE_THROWS_AS(AnchorSet({{0, 3}}), ConfigError);

  // Three well-separated clusters.
  std::mt19937_64 rng(4);
  std::vector<Anchor> hulls;
  for (double base : {10.0, 40.0, 120.0})
    for (int i = 0; i < 50; ++i)
      hulls.push_back({base * uniform(rng, 0.95, 1.05), base * uniform(rng, 0.95, 1.05)});
  const AnchorSet fit = fit_anchors(hulls, 3, 1);
  REQUIRE(fit[0].w == Approx(10.0).epsilon(0.05));
  REQUIRE(fit[1].w == Approx(40.0).epsilon(0.05));
  REQUIRE(fit[2].w == Approx(120.0).epsilon(0.05));
}

TEST_CASE("build_targets: cell midpoint and mean size", "[codec]") {
  for (auto [i, j] : {std::pair{0, 0}, {3, 4}, {12, 7}}) {
    const InstanceKeypoints inst = instance_at(Vec2(32.0 * (i + 0.5), 32.0 * (j + 0.5)));
    const TargetTensor t = build_targets(std::span(&inst, 1), kGrid, kAnchors, kMeans);
    REQUIRE(t.slots.size() == 1);
    const ResponsibleSlot& s = t.slots[0];
    REQUIRE(s.cell_x == i);
    REQUIRE(s.cell_y == j);
    const auto v = t.values.slot(j, i, s.anchor);
    REQUIRE(sigmoid(v[kCenterX]) == Approx(0.5).margin(1e-15));
    REQUIRE(sigmoid(v[kCenterY]) == Approx(0.5).margin(1e-15));
    REQUIRE(v[kSizeH] == Approx(0.0).margin(1e-15));
    REQUIRE(v[kSizeW] == Approx(0.0).margin(1e-15));
    REQUIRE(v[kSizeL] == Approx(0.0).margin(1e-15));
    // Vertex offsets are raw distances from the cell corner in grid units.
    REQUIRE(v[keypoint_x_index(1)] == Approx(inst.pixels[1].x() / 32.0 - i));
    REQUIRE(t.responsible(kGrid, j, i, s.anchor));
  }
}

TEST_CASE("build_targets: responsible anchor is the best hull match", "[codec]") {
  // Anchor sizes 12..120 px; hull of a 2*half square-ish instance.
  const InstanceKeypoints inst = instance_at(Vec2(200, 200), 55.0);
  const TargetTensor t = build_targets(std::span(&inst, 1), kGrid, kAnchors, kMeans);
  const Rect h = hull_rect(inst.pixels);
  int best = 0;
  for (int a = 1; a < 5; ++a)
    if (centered_iou(h.width(), h.height(), kAnchors[a].w, kAnchors[a].h) >
        centered_iou(h.width(), h.height(), kAnchors[best].w, kAnchors[best].h))
      best = a;
  REQUIRE(t.slots[0].anchor == best);
}

TEST_CASE("build_targets: off-image centers and anchor exhaustion", "[codec]") {
  std::vector<InstanceKeypoints> inst;
  inst.push_back(instance_at(Vec2(-5, 100)));
  inst.push_back(instance_at(Vec2(100, 416.0)));
  for (int i = 0; i < 7; ++i) inst.push_back(instance_at(Vec2(100 + i, 100)));
  const TargetTensor t = build_targets(inst, kGrid, kAnchors, kMeans);
  REQUIRE(t.skipped_outside == 2);
  REQUIRE(t.slots.size() == 5);
  REQUIRE(t.collisions == 2);
  std::set<int> anchors;
  for (const auto& s : t.slots) anchors.insert(s.anchor);
  REQUIRE(anchors.size() == 5);
  REQUIRE(std::count(t.mask.begin(), t.mask.end(), 1) == 5);
}

TEST_CASE("build_targets from boxes skips boxes behind the camera", "[codec]") {
  const CameraIntrinsics cam = test_camera();
  OrientedBox3D b{{}, {0.03, 0.03, 0.03}};
  b.pose.translation = {0.0, 0.0, -0.5};
  const TargetTensor t = build_targets(std::span(&b, 1), cam, kGrid, kAnchors, kMeans);
  REQUIRE(t.slots.empty());
  REQUIRE(t.skipped_outside == 1);
}

TEST_CASE("decode: Eqs at zero and exponential sizes", "[codec]") {
  GridTensor<double> raw(kGrid);
  for (auto& v : raw.data()) v = 0.0;
  for (int i = 0; i < kGrid.slots(); ++i) raw.slot(i)[kConfidence] = -20.0;
  raw.at(4, 3, 2, kConfidence) = 5.0;
  raw.at(4, 3, 2, kSizeH) = std::log(2.0);
  const auto dets = decode(raw, kGrid, kMeans, 0.3);
  REQUIRE(dets.size() == 1);
  const Detection& d = dets[0];
  REQUIRE(d.keypoints[0].isApprox(Vec2(112.0, 144.0)));
  for (int k = 1; k < 9; ++k) REQUIRE(d.keypoints[k].isApprox(Vec2(96.0, 128.0)));
  REQUIRE(d.size.h == Approx(2.0 * kMeans.h).margin(1e-15));
  REQUIRE(d.size.w == Approx(kMeans.w).margin(1e-15));
  REQUIRE(d.confidence == Approx(sigmoid(5.0)));
  REQUIRE(d.cell_x == 3);
  REQUIRE(d.cell_y == 4);
  REQUIRE(d.anchor == 2);

  REQUIRE_THROWS_AS(decode(GridTensor<double>(13, 13, 4), kGrid, kMeans, 0.3), ShapeError);
}

TEST_CASE("decode never emits detections below the threshold", "[codec]") {
  std::mt19937_64 rng(8);
  GridTensor<float> raw(kGrid);
  for (auto& v : raw.data()) v = static_cast<float>(uniform(rng, -4, 4));
  for (double thr : {0.0, 0.3, 0.5, 0.9}) {
    const auto dets = decode(raw, kGrid, kMeans, thr);
    for (const auto& d : dets) REQUIRE(d.confidence >= thr);
    int expected = 0;
    for (int i = 0; i < kGrid.slots(); ++i)
      expected += sigmoid(double(raw.slot(i)[kConfidence])) >= thr;
    REQUIRE(static_cast<int>(dets.size()) == expected);
  }
}

TEST_CASE("decode o build_targets round trip", "[codec]") {
  std::mt19937_64 rng(12345);
  const CameraIntrinsics cam = test_camera();
  for (int scene = 0; scene < 100; ++scene) {
    std::vector<OrientedBox3D> boxes;
    const int n = std::uniform_int_distribution<int>(1, 6)(rng);
    for (int i = 0; i < n; ++i) boxes.push_back(random_visible_box(rng, cam));
    const TargetTensor t = build_targets(boxes, cam, kGrid, kAnchors, kMeans);
    const auto dets = decode(with_confidence(t, kGrid), kGrid, kMeans, 0.5);
    REQUIRE(dets.size() == t.slots.size());
    for (const ResponsibleSlot& s : t.slots) {
      const auto it = std::find_if(dets.begin(), dets.end(), [&](const Detection& d) {
        return d.cell_x == s.cell_x && d.cell_y == s.cell_y && d.anchor == s.anchor;
      });
      REQUIRE(it != dets.end());
      const Keypoints2D truth = project_keypoints(boxes[s.instance], cam);
      for (int k = 0; k < 9; ++k) REQUIRE((it->keypoints[k] - truth[k]).norm() < 1e-4);
      REQUIRE(std::abs(it->size.h - boxes[s.instance].size.h) < 1e-9);
      REQUIRE(std::abs(it->size.w - boxes[s.instance].size.w) < 1e-9);
      REQUIRE(std::abs(it->size.l - boxes[s.instance].size.l) < 1e-9);
    }
  }
}

TEST_CASE("confidence_target", "[codec]") {
  Keypoints2D gt;
  for (int k = 0; k < 9; ++k) gt[k] = Vec2(10.0 * k, 5.0 * k);
  REQUIRE(confidence_target(gt, gt, 30.0, 2.0) == Approx(1.0).margin(1e-15));

  auto shifted = [&](double d) {
    Keypoints2D p = gt;
    for (auto& q : p) q.x() += d;
    return p;
  };
  REQUIRE(confidence_target(shifted(30.0), gt, 30.0, 2.0) == 0.0);
  REQUIRE(confidence_target(shifted(45.0), gt, 30.0, 2.0) == 0.0);
  const double expected = (std::exp(1.0) - 1.0) / (std::exp(2.0) - 1.0);
  REQUIRE(expected == Approx(0.2689).margin(1e-4));
  REQUIRE(confidence_target(shifted(15.0), gt, 30.0, 2.0) == Approx(expected).margin(1e-12));

  SECTION("non-increasing in D and continuous at the cutoff") {
    double prev = 2.0;
    for (double d = 0.0; d <= 40.0; d += 0.25) {
      const double c = confidence_target(shifted(d), gt, 30.0, 2.0);
      REQUIRE(c <= prev);
      REQUIRE(c >= 0.0);
      prev = c;
    }
    REQUIRE(confidence_target(shifted(30.0 - 1e-9), gt, 30.0, 2.0) < 1e-9);
  }
}

TEST_CASE("nms", "[codec]") {
  REQUIRE(nms({}, 0.45).empty());

  Detection a;
  a.keypoints = instance_at(Vec2(100, 100)).pixels;
  a.confidence = 0.9;
  Detection b = a;
  b.confidence = 0.6;
  auto out = nms({b, a}, 0.45);
  REQUIRE(out.size() == 1);
  REQUIRE(out[0].confidence == 0.9);

  SECTION("detections below the IoU threshold are all kept, sorted") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<Detection> dets;
      for (int i = 0; i < 6; ++i) {
        Detection d;
        d.keypoints = instance_at(Vec2(uniform(rng, 0, 400), uniform(rng, 0, 400)),
                                  uniform(rng, 5, 30)).pixels;
        d.confidence = uniform(rng, 0, 1);
        dets.push_back(d);
      }
      // Pairwise oracle.
      bool all_low = true;
      for (std::size_t i = 0; i < dets.size(); ++i)
        for (std::size_t j = i + 1; j < dets.size(); ++j)
          all_low &= rect_iou(hull_rect(dets[i].keypoints), hull_rect(dets[j].keypoints)) <= 0.45;
      const auto kept = nms(dets, 0.45);
      if (all_low) REQUIRE(kept.size() == dets.size());
      for (std::size_t i = 1; i < kept.size(); ++i)
        REQUIRE(kept[i - 1].confidence >= kept[i].confidence);
      for (const Detection& k : kept) {
        REQUIRE(std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
          return d.confidence == k.confidence && d.keypoints[0] == k.keypoints[0];
        }));
      }
    }
  }
}
