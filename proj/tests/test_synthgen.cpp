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

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "berrypose/synthgen.hpp"

using namespace berrypose;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

SceneConfig small_config() {
  SceneConfig c;
  c.width = 160;
  c.height = 120;
  return c;
}

SceneSpec empty_spec(int w = 160, int h = 120) {
  SceneSpec s;
  SceneConfig c;
  c.width = w;
  c.height = h;
  s.intrinsics = c.intrinsics();
  return s;
}

BerrySpec berry_at(const Vec3& t, const Size3D& size) {
  BerrySpec b;
  b.size = size;
  b.world.translation = t;
  b.texture_seed = 7;
  b.maturity = 0.8;
  return b;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("berrypose_synthgen_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("sample_scene is deterministic") {
  const SceneConfig c = small_config();
  const SceneSpec a = sample_scene(42, c), b = sample_scene(42, c);
  REQUIRE(a.berries.size() == b.berries.size());
  for (std::size_t i = 0; i < a.berries.size(); ++i) {
    CHECK(a.berries[i].size.h == b.berries[i].size.h);
    CHECK(a.berries[i].world.translation == b.berries[i].world.translation);
    CHECK(a.berries[i].world.rotation.matrix() == b.berries[i].world.rotation.matrix());
    CHECK(a.berries[i].maturity == b.berries[i].maturity);
  }
  CHECK(a.leaves.size() == b.leaves.size());
  CHECK(a.camera.translation == b.camera.translation);
  const SampleRecord ra = render_scene(a), rb = render_scene(b);
  CHECK(ra.rgb.data == rb.rgb.data);
  CHECK(ra.mask.data == rb.mask.data);
}

TEST_CASE("berry count range [3,3] gives exactly three berries") {
  SceneConfig c = small_config();
  c.count_min = c.count_max = 3;
  for (std::uint64_t s = 0; s < 20; ++s) CHECK(sample_scene(s, c).berries.size() == 3);
}

TEST_CASE("scene invariants hold over many seeds") {
  const SceneConfig c = small_config();
  std::map<int, int> counts;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const SceneSpec s = sample_scene(seed, c);
    counts[static_cast<int>(s.berries.size())]++;
    CHECK(s.light.direction.y() <= 0.0);
    CHECK(s.light.direction.norm() == Approx(1.0));
    const Pose to_cam = s.camera.inverse();
    for (const BerrySpec& b : s.berries) {
      CHECK(b.size.h >= c.h_min);
      CHECK(b.size.h <= c.h_max);
      CHECK(b.size.w >= c.w_min);
      CHECK(b.size.w <= c.w_max);
      CHECK(b.size.l >= c.w_min);
      CHECK(b.size.l <= c.w_max);
      CHECK(b.maturity >= 0.0);
      CHECK(b.maturity <= 1.0);
      const double d = to_cam.apply(b.world.translation).norm();
      CHECK(d >= c.distance_min - 1e-9);
      CHECK(d <= c.distance_max + 1e-9);
    }
  }
  CHECK(counts.size() == 8);
  CHECK(counts.begin()->first == 1);
  CHECK(counts.rbegin()->first == 8);
}

TEST_CASE("sampled sizes match the log-uniform mean") {
  const SceneConfig c;
  std::mt19937_64 rng(99);
  const int n = 10000;
  double sh = 0, sw = 0, sl = 0;
  for (int i = 0; i < n; ++i) {
    const Size3D s = sample_size(rng, c);
    sh += s.h;
    sw += s.w;
    sl += s.l;
  }
  auto log_mean = [](double a, double b) { return (b - a) / std::log(b / a); };
  CHECK(sh / n == Approx(log_mean(c.h_min, c.h_max)).epsilon(0.02));
  CHECK(sw / n == Approx(log_mean(c.w_min, c.w_max)).epsilon(0.02));

  // l = clamp(w * j, lo, hi): midpoint-rule double integral over the densities
  const int m = 800;
  double el = 0.0;
  const double a = std::log(c.w_min), b = std::log(c.w_max);
  for (int i = 0; i < m; ++i) {
    const double w = std::exp(a + (b - a) * (i + 0.5) / m);
    for (int j = 0; j < m; ++j) {
      const double f = 1.0 - c.wl_jitter + 2.0 * c.wl_jitter * (j + 0.5) / m;
      el += std::min(c.w_max, std::max(c.w_min, w * f));
    }
  }
  el /= static_cast<double>(m) * m;
  CHECK(sl / n == Approx(el).epsilon(0.02));
}

TEST_CASE("impossible configs are rejected") {
  SceneConfig c;
  c.count_min = 5;
  c.count_max = 2;
  CHECK_THROWS_AS(sample_scene(1, c), ConfigError);
  c = SceneConfig{};
  c.h_min = 0.06;
  CHECK_THROWS_AS(sample_scene(1, c), ConfigError);
  c = SceneConfig{};
  c.distance_min = 1.0;
  CHECK_THROWS_AS(sample_scene(1, c), ConfigError);
  c = SceneConfig{};
  c.hanging_bias = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("single centered berry: depth lies within the box depth extent") {
  SceneSpec s = empty_spec();
  const Size3D size{0.04, 0.03, 0.03};
  s.berries.push_back(berry_at(Vec3(0, 0, 0.4), size));
  const SampleRecord r = render_scene(s);
  std::size_t pixels = 0;
  for (std::size_t i = 0; i < r.mask.data.size(); ++i) {
    if (r.mask.data[i] != 1) continue;
    ++pixels;
    // identity rotation: the box spans z in [0.4 - l/2, 0.4 + l/2]
    CHECK(r.depth[i] >= 0.4 - size.l / 2 - 1e-6);
    CHECK(r.depth[i] <= 0.4 + size.l / 2 + 1e-6);
  }
  CHECK(pixels > 50);
  REQUIRE(r.annotations.size() == 1);
  CHECK(r.annotations[0].visible_fraction == Approx(1.0));
  CHECK_FALSE(r.annotations[0].truncated);
  // the centered berry covers the principal point
  const int cx = static_cast<int>(std::lround(s.intrinsics.cx));
  const int cy = static_cast<int>(std::lround(s.intrinsics.cy));
  CHECK(r.mask.at(cx, cy) == 1);
}

TEST_CASE("empty scene renders only background") {
  const SampleRecord r = render_scene(empty_spec());
  CHECK(r.annotations.empty());
  for (std::uint16_t v : r.mask.data) CHECK(v == 0);
  for (float d : r.depth) CHECK(d == 0.0f);
  CHECK(point_cloud(r).empty());
}

TEST_CASE("berry behind a leaf is annotated with zero visibility") {
  SceneSpec s = empty_spec();
  s.berries.push_back(berry_at(Vec3(0, 0, 0.5), {0.03, 0.025, 0.025}));
  LeafSpec leaf;
  leaf.center = Vec3(0, 0, 0.3);
  leaf.axis_u = Vec3::UnitX();
  leaf.axis_v = Vec3::UnitY();
  leaf.length = 0.2;
  leaf.width = 0.2;
  leaf.color = Vec3(0.1, 0.5, 0.1);
  s.leaves.push_back(leaf);
  const SampleRecord r = render_scene(s);
  REQUIRE(r.annotations.size() == 1);
  CHECK(r.annotations[0].visible_fraction == 0.0);
  for (std::uint16_t v : r.mask.data) CHECK(v == 0);
}

TEST_CASE("berries outside the image are not annotated") {
  SceneSpec s = empty_spec();
  s.berries.push_back(berry_at(Vec3(1.0, 0, 0.4), {0.03, 0.025, 0.025}));
  s.berries.push_back(berry_at(Vec3(0, 0, -0.4), {0.03, 0.025, 0.025}));
  CHECK(render_scene(s).annotations.empty());
}

TEST_CASE("point cloud of constant 1 m depth lies on z = 1") {
  const CameraIntrinsics k = small_config().intrinsics();
  std::vector<float> depth(static_cast<std::size_t>(k.width) * k.height, 1.0f);
  const auto pts = point_cloud(depth, k);
  REQUIRE(pts.size() == depth.size());
  for (const Vec3& p : pts) CHECK(p.z() == 1.0);
  std::vector<float> none(depth.size(), 0.0f);
  CHECK(point_cloud(none, k).empty());
  CHECK_THROWS_AS(point_cloud(std::span<const float>(none.data(), 10), k), ShapeError);
}

TEST_CASE("point cloud reprojects onto its source pixels") {
  const SampleRecord r = render_scene(sample_scene(5, small_config()));
  const CameraIntrinsics& k = r.intrinsics;
  std::vector<Vec2> src;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x)
      if (r.depth[static_cast<std::size_t>(y) * k.width + x] > 0) src.emplace_back(x, y);
  const auto pts = point_cloud(r);
  REQUIRE(pts.size() == src.size());
  REQUIRE_FALSE(pts.empty());
  double worst = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    // pinhole projection by hand
    const Vec2 u(k.fx * pts[i].x() / pts[i].z() + k.cx, k.fy * pts[i].y() / pts[i].z() + k.cy);
    worst = std::max(worst, (u - src[i]).norm());
  }
  CHECK(worst < 0.5);
}

TEST_CASE("rendered records satisfy depth, mask and annotation invariants") {
  const SceneConfig c = small_config();
  int annotated = 0, partially_hidden = 0;
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    const SampleRecord r = render_scene(sample_scene(seed, c));
    const CameraIntrinsics& k = r.intrinsics;
    std::map<int, const Annotation*> by_id;
    for (const Annotation& a : r.annotations) {
      by_id[a.id] = &a;
      ++annotated;
      // center in image
      const Vec3& t = a.box.pose.translation;
      const Vec2 ctr(k.fx * t.x() / t.z() + k.cx, k.fy * t.y() / t.z() + k.cy);
      CHECK(ctr.x() >= 0.0);
      CHECK(ctr.y() >= 0.0);
      CHECK(ctr.x() < k.width);
      CHECK(ctr.y() < k.height);
      CHECK(a.visible_fraction >= 0.0);
      CHECK(a.visible_fraction <= 1.0);
      if (a.visible_fraction < 0.99) ++partially_hidden;
      if (!a.truncated)
        for (const Vec3& x : box_corners(a.box)) {
          const Vec2 p(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy);
          CHECK(p.x() >= -c.truncation_margin_px);
          CHECK(p.y() >= -c.truncation_margin_px);
          CHECK(p.x() <= k.width - 1 + c.truncation_margin_px);
          CHECK(p.y() <= k.height - 1 + c.truncation_margin_px);
        }
    }
    std::map<int, int> owned;
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * k.width + x;
        const int id = r.mask.data[p];
        if (id == 0) continue;
        CHECK(r.depth[p] > 0.0f);
        owned[id]++;
        auto it = by_id.find(id);
        if (it == by_id.end()) continue;
        const OrientedBox3D& b = it->second->box;
        const double half = 0.5 * b.size.diagonal();
        CHECK(r.depth[p] >= b.pose.translation.z() - half - 1e-4);
        CHECK(r.depth[p] <= b.pose.translation.z() + half + 1e-4);
      }
    for (const Annotation& a : r.annotations)
      CHECK((owned[a.id] > 0 || a.visible_fraction == 0.0));
  }
  CHECK(annotated > 40);
  CHECK(partially_hidden > 0);
}

TEST_CASE("generate_dataset writes records, manifest and mean size") {
  const fs::path out = scratch("gen");
  SceneConfig c = small_config();
  const Manifest m = generate_dataset(10, out, c, 77, 0.8, 2);
  CHECK(m.count == 10);
  CHECK(m.split_count("train") == 8);
  CHECK(m.split_count("test") == 2);
  REQUIRE(fs::exists(out / "manifest.json"));
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_directory()) ++dirs;
  CHECK(dirs == 10);

  const Manifest back = manifest_from_json(read_json_file(out / "manifest.json"));
  CHECK(back.count == 10);
  double sh = 0, sw = 0, sl = 0;
  int n = 0;
  for (const ManifestSample& s : back.samples) {
    const fs::path d = out / s.id;
    REQUIRE(fs::exists(d / "rgb.png"));
    const RgbImage rgb = read_rgb_png(d / "rgb.png");
    const Gray16Image depth = read_gray16_png(d / "depth.png");
    const Gray16Image mask = read_gray16_png(d / "mask.png");
    CHECK(rgb.width == c.width);
    CHECK(depth.height == c.height);
    const AnnotationFile a = annotation_from_json(read_json_file(d / "ann.json"));
    // re-render and compare the stored products
    const SampleRecord r = render_scene(sample_scene(sample_seed(77, std::stoi(s.id)), c));
    CHECK(rgb.data == r.rgb.data);
    CHECK(mask.data == r.mask.data);
    for (std::size_t i = 0; i < r.depth.size(); ++i)
      CHECK(std::abs(depth.data[i] - r.depth[i] * 1000.0) <= 0.5);
    REQUIRE(a.instances.size() == r.annotations.size());
    for (std::size_t i = 0; i < a.instances.size(); ++i) {
      CHECK(a.instances[i].box.size.h == r.annotations[i].box.size.h);
      CHECK(a.instances[i].box.pose.translation == r.annotations[i].box.pose.translation);
    }
    if (s.split != "train") continue;
    for (const Annotation& x : a.instances) {
      sh += x.box.size.h;
      sw += x.box.size.w;
      sl += x.box.size.l;
      ++n;
    }
  }
  REQUIRE(n > 0);
  CHECK(back.mean_size.h == Approx(sh / n).epsilon(1e-12));
  CHECK(back.mean_size.w == Approx(sw / n).epsilon(1e-12));
  CHECK(back.mean_size.l == Approx(sl / n).epsilon(1e-12));

  // same seed, different thread count: byte-identical annotations
  const fs::path again = scratch("gen2");
  generate_dataset(10, again, c, 77, 0.8, 1);
  CHECK(slurp(out / "manifest.json") == slurp(again / "manifest.json"));
  for (const ManifestSample& s : back.samples)
    CHECK(slurp(out / s.id / "ann.json") == slurp(again / s.id / "ann.json"));
  fs::remove_all(out);
  fs::remove_all(again);
}

TEST_CASE("generate_dataset reports the failing path") {
  const fs::path blocker = scratch("blocker");
  { std::ofstream(blocker) << "x"; }
  try {
    generate_dataset(1, blocker / "sub", small_config(), 1);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(blocker.string()) != std::string::npos);
  }
  fs::remove(blocker);
}
