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
/// \brief Procedural strawberry scenes and a small z-buffer rasterizer.
///
/// World frame: +y points down (gravity), so a level camera shares its axes.
/// A hanging berry has its tip (+y of the box frame) pointing down.
///
/// Berry surface, t in [0, 1] from calyx to tip, phi around the axis:
///   y = h (t - 1/2),  r(t) = sin(pi t^g)^e,  x = w/2 r cos phi,  z = l/2 r sin phi
/// which touches all six faces of its (h, w, l) box.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "berrypose/error.hpp"
#include "berrypose/format.hpp"
#include "berrypose/geometry.hpp"
#include "berrypose/image_io.hpp"

namespace berrypose {

struct SceneConfig {
  int width = 416;
  int height = 416;
  double hfov_deg = 60.0;
  int count_min = 1;
  int count_max = 8;
  double h_min = 0.02, h_max = 0.05;
  double w_min = 0.015, w_max = 0.04;
  double wl_jitter = 0.1;  ///< l = w * U(1 - j, 1 + j), clamped to [w_min, w_max]
  double distance_min = 0.2, distance_max = 0.8;
  double hanging_bias = 0.5;  ///< probability of a hanging (tip-down) orientation
  double hanging_tilt_deg = 30.0;
  double camera_cone_deg = 35.0;
  double center_margin = 0.04;  ///< berry centers keep this image fraction from the border
  int leaves_min = 0, leaves_max = 6;
  double leaf_min = 0.02, leaf_max = 0.07;
  double leaf_occlusion_bias = 0.5;  ///< share of leaves placed in front of a berry
  double light_min = 0.6, light_max = 1.2;
  double ambient_min = 0.15, ambient_max = 0.4;
  double truncation_margin_px = 0.0;
  int rings = 20, segments = 28;

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi))
        throw ConfigError(std::string("scene: ") + what + " min > max");
    };
    if (width <= 0 || height <= 0) throw ConfigError("scene: image size must be positive");
    if (!(hfov_deg > 1.0 && hfov_deg < 170.0)) throw ConfigError("scene: hfov out of range");
    if (count_min < 0 || count_min > count_max) throw ConfigError("scene: berry count min > max");
    if (count_max > 65535) throw ConfigError("scene: too many berries");
    range(h_min, h_max, "height");
    range(w_min, w_max, "width");
    range(distance_min, distance_max, "distance");
    range(leaf_min, leaf_max, "leaf size");
    range(light_min, light_max, "light");
    range(ambient_min, ambient_max, "ambient");
    if (leaves_min < 0 || leaves_min > leaves_max) throw ConfigError("scene: leaf count min > max");
    if (!(h_min > 0.0 && w_min > 0.0)) throw ConfigError("scene: sizes must be positive");
    if (!(distance_min > 0.05)) throw ConfigError("scene: distance_min must exceed 5 cm");
    if (!(wl_jitter >= 0.0 && wl_jitter < 1.0)) throw ConfigError("scene: wl_jitter in [0, 1)");
    if (!(hanging_bias >= 0.0 && hanging_bias <= 1.0)) throw ConfigError("scene: hanging_bias in [0, 1]");
    if (!(leaf_occlusion_bias >= 0.0 && leaf_occlusion_bias <= 1.0))
      throw ConfigError("scene: leaf_occlusion_bias in [0, 1]");
    if (!(center_margin >= 0.0 && center_margin < 0.5)) throw ConfigError("scene: center_margin in [0, 0.5)");
    if (rings < 3 || segments < 3) throw ConfigError("scene: mesh too coarse");
  }

  CameraIntrinsics intrinsics() const {
    const double f = 0.5 * width / std::tan(0.5 * hfov_deg * std::numbers::pi / 180.0);
    return {f, f, 0.5 * (width - 1), 0.5 * (height - 1), width, height};
  }

  Json to_json() const {
    return {{"width", width},           {"height", height},
            {"hfov_deg", hfov_deg},     {"count", {count_min, count_max}},
            {"h", {h_min, h_max}},      {"w", {w_min, w_max}},
            {"wl_jitter", wl_jitter},   {"distance", {distance_min, distance_max}},
            {"hanging_bias", hanging_bias}, {"leaves", {leaves_min, leaves_max}}};
  }
};

struct BerrySpec {
  Size3D size;
  Pose world;  ///< box frame -> world
  double maturity = 0.0;
  Vec3 tint = Vec3::Ones();
  std::uint64_t texture_seed = 0;
};

struct LeafSpec {
  Vec3 center;     ///< world
  Vec3 axis_u;     ///< unit, along the blade
  Vec3 axis_v;     ///< unit, across the blade
  double length = 0.05;
  double width = 0.03;
  Vec3 color;
};

struct LightSpec {
  Vec3 direction = Vec3(0, -1, 0);  ///< world, unit, towards the light
  double intensity = 1.0;
  double ambient = 0.3;
};

struct SceneSpec {
  std::vector<BerrySpec> berries;
  std::vector<LeafSpec> leaves;
  LightSpec light;
  Pose camera;  ///< camera -> world
  CameraIntrinsics intrinsics;
  Vec3 background_top = Vec3(0.4, 0.5, 0.4);
  Vec3 background_bottom = Vec3(0.3, 0.25, 0.2);
  std::uint64_t noise_seed = 0;
  double truncation_margin_px = 0.0;
  int rings = 20, segments = 28;
};

struct SampleRecord {
  RgbImage rgb;
  std::vector<float> depth;  ///< meters per pixel, 0 where nothing was drawn
  Gray16Image mask;          ///< instance id per pixel, 0 = background / leaf
  std::vector<Annotation> annotations;
  CameraIntrinsics intrinsics;
};

// ---------------------------------------------------------------------------
// Sampling

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
}

inline Rotation uniform_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  double w, x, y, z, s;
  do {
    w = n(rng);
    x = n(rng);
    y = n(rng);
    z = n(rng);
    s = w * w + x * x + y * y + z * z;
  } while (s < 1e-12);
  return Rotation::from_wxyz(w, x, y, z);
}

inline Size3D sample_size(std::mt19937_64& rng, const SceneConfig& c) {
  Size3D s;
  s.h = log_uniform(rng, c.h_min, c.h_max);
  s.w = log_uniform(rng, c.w_min, c.w_max);
  const double j = std::uniform_real_distribution<double>(1.0 - c.wl_jitter, 1.0 + c.wl_jitter)(rng);
  s.l = std::clamp(s.w * j, c.w_min, c.w_max);
  return s;
}

namespace detail {

// Rotation taking +z to `forward` with image-down as close to world +y as possible.
inline Mat3 look_rotation(const Vec3& forward, double roll) {
  const Vec3 z = forward.normalized();
  Vec3 down(0, 1, 0);
  if (std::abs(z.dot(down)) > 0.999) down = Vec3(0, 0, 1);
  const Vec3 x = down.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r * Eigen::AngleAxisd(roll, Vec3::UnitZ()).toRotationMatrix();
}

// Unit vector within `half_angle` of `axis`, uniform on the spherical cap.
inline Vec3 cone_direction(std::mt19937_64& rng, const Vec3& axis, double half_angle) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cos_t = 1.0 - u(rng) * (1.0 - std::cos(half_angle));
  const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
  const double phi = 2.0 * std::numbers::pi * u(rng);
  const Vec3 a = axis.normalized();
  const Vec3 p = (std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY()).cross(a).normalized();
  const Vec3 q = a.cross(p);
  return (cos_t * a + sin_t * (std::cos(phi) * p + std::sin(phi) * q)).normalized();
}

inline Vec3 hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace detail

/// Deterministic scene for `seed`.
inline SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const double deg = std::numbers::pi / 180.0;

  SceneSpec s;
  s.intrinsics = cfg.intrinsics();
  s.truncation_margin_px = cfg.truncation_margin_px;
  s.rings = cfg.rings;
  s.segments = cfg.segments;

  // camera looks at the world origin from inside a cone around +z
  const Vec3 forward = detail::cone_direction(rng, Vec3::UnitZ(), cfg.camera_cone_deg * deg);
  const double standoff = 0.5 * (cfg.distance_min + cfg.distance_max);
  s.camera.rotation = Rotation::from_matrix(detail::look_rotation(forward, uni(-10, 10) * deg));
  s.camera.translation = -standoff * forward;
  const Mat3 rc = s.camera.rotation.matrix();
  const CameraIntrinsics& k = s.intrinsics;

  // light on the upper hemisphere (world -y is up)
  {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec3 d(n(rng), n(rng), n(rng));
    if (d.norm() < 1e-9) d = Vec3(0, -1, 0);
    d.normalize();
    if (d.y() > 0) d.y() = -d.y();
    s.light.direction = d;
    s.light.intensity = uni(cfg.light_min, cfg.light_max);
    s.light.ambient = uni(cfg.ambient_min, cfg.ambient_max);
  }

  const int count = std::uniform_int_distribution<int>(cfg.count_min, cfg.count_max)(rng);
  const double m = cfg.center_margin;
  for (int i = 0; i < count; ++i) {
    BerrySpec b;
    b.size = sample_size(rng, cfg);
    const double radius = 0.5 * std::sqrt(b.size.h * b.size.h + b.size.w * b.size.w + b.size.l * b.size.l);
    Vec3 cam_pos = Vec3::Zero();
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double px = uni(m, 1.0 - m) * (k.width - 1);
      const double py = uni(m, 1.0 - m) * (k.height - 1);
      const double range = uni(cfg.distance_min, cfg.distance_max);
      cam_pos = Vec3((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0).normalized() * range;
      bool clear = true;
      for (const BerrySpec& o : s.berries) {
        const Vec3 oc = s.camera.inverse().apply(o.world.translation);
        const double orad = 0.5 * std::sqrt(o.size.h * o.size.h + o.size.w * o.size.w + o.size.l * o.size.l);
        if ((oc - cam_pos).norm() < 0.8 * (radius + orad)) clear = false;
      }
      if (clear) break;
    }
    b.world.translation = rc * cam_pos + s.camera.translation;
    if (u01(rng) < cfg.hanging_bias) {
      const Vec3 tilt_axis = Vec3(u01(rng) - 0.5, 0.0, u01(rng) - 0.5).normalized();
      const double tilt = uni(0.0, cfg.hanging_tilt_deg) * deg;
      b.world.rotation = Rotation::from_axis_angle(tilt_axis.allFinite() ? tilt_axis : Vec3::UnitX(), tilt) *
                         Rotation::about_symmetry_axis(uni(0.0, 2.0 * std::numbers::pi));
    } else {
      b.world.rotation = uniform_rotation(rng);
    }
    b.maturity = u01(rng);
    b.tint = Vec3(uni(0.85, 1.15), uni(0.85, 1.15), uni(0.85, 1.15));
    b.texture_seed = rng();
    s.berries.push_back(b);
  }

  const int leaves = std::uniform_int_distribution<int>(cfg.leaves_min, cfg.leaves_max)(rng);
  for (int i = 0; i < leaves; ++i) {
    LeafSpec l;
    Vec3 c;
    if (!s.berries.empty() && u01(rng) < cfg.leaf_occlusion_bias) {
      // in front of a berry, partly covering it
      const BerrySpec& b = s.berries[std::uniform_int_distribution<std::size_t>(0, s.berries.size() - 1)(rng)];
      const Vec3 bc = s.camera.inverse().apply(b.world.translation);
      const double f = uni(0.5, 0.9);
      c = bc * f + Vec3(uni(-1, 1), uni(-1, 1), 0.0) * (0.5 * b.size.diagonal() * f);
    } else {
      const double px = uni(0.0, k.width - 1.0), py = uni(0.0, k.height - 1.0);
      const double range = uni(std::max(0.1, 0.6 * cfg.distance_min), cfg.distance_max + 0.1);
      c = Vec3((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0).normalized() * range;
    }
    const Vec3 normal = detail::cone_direction(rng, -c.normalized(), 60.0 * deg);
    const Vec3 t = (std::abs(normal.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY()).cross(normal).normalized();
    const double spin = uni(0.0, 2.0 * std::numbers::pi);
    const Vec3 au = std::cos(spin) * t + std::sin(spin) * normal.cross(t);
    l.center = rc * c + s.camera.translation;
    l.axis_u = rc * au;
    l.axis_v = rc * normal.cross(au);
    l.length = uni(cfg.leaf_min, cfg.leaf_max);
    l.width = l.length * uni(0.4, 0.7);
    l.color = detail::hsv(uni(0.22, 0.4), uni(0.4, 0.9), uni(0.25, 0.7));
    s.leaves.push_back(l);
  }

  s.background_top = detail::hsv(u01(rng), uni(0.0, 0.6), uni(0.2, 0.9));
  s.background_bottom = detail::hsv(u01(rng), uni(0.0, 0.6), uni(0.1, 0.7));
  s.noise_seed = rng();
  return s;
}

// ---------------------------------------------------------------------------
// Rasterization

namespace detail {

struct Vertex {
  Vec3 pos;    ///< camera frame
  Vec3 color;  ///< linear, already lit
};

struct Raster {
  int width = 0, height = 0;
  std::vector<float> depth;
  std::vector<Vec3> color;
  std::vector<std::uint16_t> id;

  Raster(int w, int h)
      : width(w),
        height(h),
        depth(static_cast<std::size_t>(w) * h, 0.0f),
        color(static_cast<std::size_t>(w) * h, Vec3::Zero()),
        id(static_cast<std::size_t>(w) * h, 0) {}
};

inline constexpr double kNear = 0.01;

// Draws one triangle with perspective-correct interpolation. `shade` may
// reject a sample given perspective-correct barycentrics (for cut-outs).
template <class Shade>
void draw_triangle(Raster& r, const CameraIntrinsics& k, const Vertex& a, const Vertex& b,
                   const Vertex& c, std::uint16_t id, Shade&& shade, std::size_t* covered = nullptr,
                   bool write = true) {
  if (a.pos.z() < kNear || b.pos.z() < kNear || c.pos.z() < kNear) return;
  const Vertex* v[3] = {&a, &b, &c};
  double sx[3], sy[3], iz[3];
  for (int i = 0; i < 3; ++i) {
    iz[i] = 1.0 / v[i]->pos.z();
    sx[i] = k.fx * v[i]->pos.x() * iz[i] + k.cx;
    sy[i] = k.fy * v[i]->pos.y() * iz[i] + k.cy;
  }
  const double area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0]);
  if (std::abs(area) < 1e-12) return;
  const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({sx[0], sx[1], sx[2]}))));
  const int x1 = std::min(r.width - 1, static_cast<int>(std::floor(std::max({sx[0], sx[1], sx[2]}))));
  const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({sy[0], sy[1], sy[2]}))));
  const int y1 = std::min(r.height - 1, static_cast<int>(std::floor(std::max({sy[0], sy[1], sy[2]}))));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double w[3];
      for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3, l = (i + 2) % 3;
        w[i] = ((sx[l] - sx[j]) * (y - sy[j]) - (sy[l] - sy[j]) * (x - sx[j])) / area;
      }
      if (w[0] < 0 || w[1] < 0 || w[2] < 0) continue;
      const double inv_z = w[0] * iz[0] + w[1] * iz[1] + w[2] * iz[2];
      const double z = 1.0 / inv_z;
      const std::size_t p = static_cast<std::size_t>(y) * r.width + x;
      if (r.depth[p] != 0.0f && !(z < r.depth[p])) continue;
      const std::array<double, 3> pc = {w[0] * iz[0] * z, w[1] * iz[1] * z, w[2] * iz[2] * z};
      Vec3 col = pc[0] * a.color + pc[1] * b.color + pc[2] * c.color;
      if (!shade(pc, col)) continue;
      if (covered) ++*covered;
      if (!write) continue;
      r.depth[p] = static_cast<float>(z);
      r.color[p] = col;
      r.id[p] = id;
    }
  }
}

inline double berry_radius(double t) {
  return std::pow(std::sin(std::numbers::pi * std::pow(t, 0.8)), 0.7);
}

inline Vec3 maturity_color(double m) {
  const Vec3 green(0.35, 0.6, 0.18), white(0.88, 0.85, 0.65), red(0.78, 0.06, 0.08);
  return m < 0.5 ? green + (white - green) * (2.0 * m) : white + (red - white) * (2.0 * m - 1.0);
}

// Local-frame berry mesh: positions, normals, base colors; triangles as indices.
struct Mesh {
  std::vector<Vec3> pos, normal, color;
  std::vector<std::array<int, 3>> tris;
};

inline Mesh berry_mesh(const BerrySpec& b, int rings, int segments) {
  Mesh m;
  std::mt19937_64 rng(b.texture_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vec3 base = maturity_color(b.maturity).cwiseProduct(b.tint).cwiseMin(1.0);
  const Vec3 calyx(0.12, 0.35, 0.08);
  auto surface = [&](double t, double phi) {
    const double r = berry_radius(t);
    return Vec3(0.5 * b.size.w * r * std::cos(phi), b.size.h * (t - 0.5), 0.5 * b.size.l * r * std::sin(phi));
  };
  // poles plus rings x segments
  m.pos.push_back(surface(0.0, 0.0));
  m.normal.push_back(Vec3(0, -1, 0));
  m.color.push_back(calyx);
  for (int i = 1; i < rings; ++i) {
    const double t = static_cast<double>(i) / rings;
    for (int j = 0; j < segments; ++j) {
      const double phi = 2.0 * std::numbers::pi * j / segments;
      const double dt = 1e-4, dp = 1e-4;
      const Vec3 p = surface(t, phi);
      const Vec3 n = (surface(t, phi + dp) - surface(t, phi - dp))
                         .cross(surface(t + dt, phi) - surface(t - dt, phi))
                         .normalized();
      m.pos.push_back(p);
      m.normal.push_back(n.dot(p - Vec3(0, p.y(), 0)) < 0 ? -n : n);
      Vec3 c = t < 0.1 ? calyx : base;
      if (t >= 0.1 && u(rng) < 0.18) c = c.cwiseProduct(Vec3(1.1, 1.05, 0.6)).cwiseMin(1.0) * 0.8;
      m.color.push_back(c * (0.92 + 0.16 * u(rng)));
    }
  }
  m.pos.push_back(surface(1.0, 0.0));
  m.normal.push_back(Vec3(0, 1, 0));
  m.color.push_back(base);
  const int top = 0, tip = static_cast<int>(m.pos.size()) - 1;
  auto at = [&](int ring, int seg) { return 1 + (ring - 1) * segments + (seg % segments); };
  for (int j = 0; j < segments; ++j) m.tris.push_back({top, at(1, j), at(1, j + 1)});
  for (int i = 1; i < rings - 1; ++i)
    for (int j = 0; j < segments; ++j) {
      m.tris.push_back({at(i, j), at(i + 1, j), at(i + 1, j + 1)});
      m.tris.push_back({at(i, j), at(i + 1, j + 1), at(i, j + 1)});
    }
  for (int j = 0; j < segments; ++j) m.tris.push_back({at(rings - 1, j), tip, at(rings - 1, j + 1)});
  return m;
}

inline std::vector<Vertex> light_mesh(const Mesh& m, const Pose& to_camera, const Vec3& light_cam,
                                      const LightSpec& light) {
  const Mat3 r = to_camera.rotation.matrix();
  std::vector<Vertex> out(m.pos.size());
  for (std::size_t i = 0; i < m.pos.size(); ++i) {
    const Vec3 n = r * m.normal[i];
    const double lambert = std::max(0.0, n.dot(light_cam));
    out[i].pos = r * m.pos[i] + to_camera.translation;
    out[i].color = m.color[i] * (light.ambient + light.intensity * lambert);
  }
  return out;
}

}  // namespace detail

/// Renders RGB, metric depth and instance ids in one z-buffer pass; every
/// berry whose center projects into the image is annotated.
inline SampleRecord render_scene(const SceneSpec& s) {
  const CameraIntrinsics& k = s.intrinsics;
  k.validate();
  detail::Raster ras(k.width, k.height);
  const Pose world_to_cam = s.camera.inverse();
  const Vec3 light_cam = (s.camera.rotation.inverse().matrix() * s.light.direction).normalized();
  auto accept = [](const std::array<double, 3>&, Vec3&) { return true; };

  std::vector<std::vector<detail::Vertex>> meshes;
  std::vector<std::vector<std::array<int, 3>>> tris;
  for (const BerrySpec& b : s.berries) {
    const detail::Mesh m = detail::berry_mesh(b, s.rings, s.segments);
    meshes.push_back(detail::light_mesh(m, world_to_cam * b.world, light_cam, s.light));
    tris.push_back(m.tris);
  }
  for (std::size_t i = 0; i < meshes.size(); ++i)
    for (const auto& t : tris[i])
      detail::draw_triangle(ras, k, meshes[i][t[0]], meshes[i][t[1]], meshes[i][t[2]],
                            static_cast<std::uint16_t>(i + 1), accept);

  for (const LeafSpec& l : s.leaves) {
    const Mat3 rc = world_to_cam.rotation.matrix();
    const Vec3 c = world_to_cam.apply(l.center);
    const Vec3 u = rc * l.axis_u * (0.5 * l.length), v = rc * l.axis_v * (0.5 * l.width);
    const Vec3 n = (rc * l.axis_u).cross(rc * l.axis_v);
    const double shade = s.light.ambient + s.light.intensity * std::abs(n.dot(light_cam));
    const Vec3 col = l.color * shade;
    // quad corners carry (s, t) in their color slot; the shader turns it into
    // an elliptic cut-out with a darker midrib
    const detail::Vertex q[4] = {{c - u - v, Vec3(-1, -1, 0)}, {c + u - v, Vec3(1, -1, 0)},
                                 {c + u + v, Vec3(1, 1, 0)}, {c - u + v, Vec3(-1, 1, 0)}};
    auto leaf = [&](const std::array<double, 3>&, Vec3& st) {
      const double a = st.x(), b = st.y();
      const double half = 1.0 - a * a;
      if (half <= 0.0 || b * b > half) return false;
      st = col * (std::abs(b) < 0.06 ? 0.75 : 1.0);
      return true;
    };
    detail::draw_triangle(ras, k, q[0], q[1], q[2], 0, leaf);
    detail::draw_triangle(ras, k, q[0], q[2], q[3], 0, leaf);
  }

  SampleRecord rec;
  rec.intrinsics = k;
  rec.rgb = RgbImage(k.width, k.height);
  rec.mask = Gray16Image(k.width, k.height);
  rec.depth = ras.depth;
  std::mt19937_64 noise(s.noise_seed);
  std::normal_distribution<double> grain(0.0, 0.02);
  for (int y = 0; y < k.height; ++y) {
    const double f = k.height > 1 ? static_cast<double>(y) / (k.height - 1) : 0.0;
    const Vec3 bg = s.background_top * (1.0 - f) + s.background_bottom * f;
    for (int x = 0; x < k.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * k.width + x;
      Vec3 c = ras.depth[p] > 0.0f ? ras.color[p] : bg;
      c += Vec3::Constant(grain(noise));
      std::uint8_t* out = rec.rgb.at(x, y);
      for (int ch = 0; ch < 3; ++ch)
        out[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(c[ch], 0.0, 1.0) * 255.0));
      rec.mask.at(x, y) = ras.id[p];
    }
  }

  for (std::size_t i = 0; i < s.berries.size(); ++i) {
    const BerrySpec& b = s.berries[i];
    Annotation an;
    an.id = static_cast<int>(i + 1);
    an.box.pose = world_to_cam * b.world;
    an.box.size = b.size;
    an.maturity = b.maturity;
    const Vec3& t = an.box.pose.translation;
    if (!(t.z() > 1e-6)) continue;
    const Vec2 center = project(t, k);
    if (!k.contains(center)) continue;
    // unoccluded footprint, for the visible fraction
    detail::Raster alone(k.width, k.height);
    std::size_t footprint = 0;
    for (const auto& tr : tris[i])
      detail::draw_triangle(alone, k, meshes[i][tr[0]], meshes[i][tr[1]], meshes[i][tr[2]], 1, accept);
    for (std::uint16_t v : alone.id) footprint += v != 0;
    std::size_t visible = 0;
    for (std::uint16_t v : ras.id) visible += v == an.id;
    an.visible_fraction = footprint ? static_cast<double>(visible) / static_cast<double>(footprint) : 0.0;
    const double mg = s.truncation_margin_px;
    for (const Vec3& corner : box_corners(an.box)) {
      if (corner.z() <= 1e-6) {
        an.truncated = true;
        break;
      }
      const Vec2 p = project(corner, k);
      if (p.x() < -mg || p.y() < -mg || p.x() > k.width - 1 + mg || p.y() > k.height - 1 + mg)
        an.truncated = true;
    }
    rec.annotations.push_back(an);
  }
  return rec;
}

/// Back-projects every pixel with positive depth.
inline std::vector<Vec3> point_cloud(std::span<const float> depth, const CameraIntrinsics& k) {
  std::vector<Vec3> out;
  if (depth.size() != static_cast<std::size_t>(k.width) * k.height)
    throw ShapeError("point_cloud: depth size does not match intrinsics");
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const double z = depth[static_cast<std::size_t>(y) * k.width + x];
      if (z > 0.0) out.push_back(back_project(Vec2(x, y), z, k));
    }
  return out;
}

inline std::vector<Vec3> point_cloud(const SampleRecord& r) {
  return point_cloud(std::span<const float>(r.depth), r.intrinsics);
}

// ---------------------------------------------------------------------------
// Dataset generation

inline std::string sample_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

inline std::uint64_t sample_seed(std::uint64_t seed, int i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), 0xda7au};
  std::uint64_t out[1];
  std::uint32_t parts[2];
  seq.generate(parts, parts + 2);
  out[0] = (static_cast<std::uint64_t>(parts[0]) << 32) | parts[1];
  return out[0];
}

inline Gray16Image depth_to_mm(const std::vector<float>& depth, int width, int height) {
  Gray16Image img(width, height);
  for (std::size_t i = 0; i < depth.size(); ++i)
    img.data[i] = static_cast<std::uint16_t>(std::clamp<long>(std::lround(depth[i] * 1000.0), 0, 65535));
  return img;
}

inline void write_sample(const std::filesystem::path& dir, const SampleRecord& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
  write_png(dir / "rgb.png", r.rgb);
  write_png(dir / "depth.png", depth_to_mm(r.depth, r.intrinsics.width, r.intrinsics.height));
  write_png(dir / "mask.png", r.mask);
  AnnotationFile a{r.intrinsics.width, r.intrinsics.height, r.intrinsics, r.annotations};
  write_json_file(dir / "ann.json", to_json(a));
}

struct GenerationStats {
  int samples = 0;
  int instances = 0;
  std::array<int, 5> visibility_histogram{};  ///< visible fraction in [0,.2) ... [.8,1]
};

/// Writes `n` samples plus manifest.json under `out`. Work is spread over
/// `threads` workers; output does not depend on the thread count.
inline Manifest generate_dataset(int n, const std::filesystem::path& out, const SceneConfig& cfg,
                                 std::uint64_t seed, double train_fraction = 0.8, int threads = 1,
                                 GenerationStats* stats = nullptr) {
  if (n < 1) throw ConfigError("gen: n must be >= 1");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("gen: train fraction in [0, 1]");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError(out.string(), "cannot create directory: " + ec.message());

  std::vector<std::vector<Annotation>> anns(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(std::max(1, threads));
  auto worker = [&](int w) {
    try {
      for (int i = next++; i < n; i = next++) {
        const SampleRecord r = render_scene(sample_scene(sample_seed(seed, i), cfg));
        write_sample(out / sample_id(i), r);
        anns[static_cast<std::size_t>(i)] = r.annotations;
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = n;
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  Manifest m;
  m.count = n;
  m.seed = seed;
  m.width = cfg.width;
  m.height = cfg.height;
  m.generator = cfg.to_json();
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 split_rng(sample_seed(seed, -1));
  std::shuffle(order.begin(), order.end(), split_rng);
  const int n_train = static_cast<int>(std::lround(train_fraction * n));
  std::vector<std::string> split(n, "test");
  for (int i = 0; i < n_train; ++i) split[order[i]] = "train";
  double sh = 0, sw = 0, sl = 0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    m.samples.push_back({sample_id(i), split[i]});
    if (split[i] != "train") continue;
    for (const Annotation& a : anns[i]) {
      sh += a.box.size.h;
      sw += a.box.size.w;
      sl += a.box.size.l;
      ++count;
    }
  }
  if (count > 0) m.mean_size = {sh / count, sw / count, sl / count};
  write_json_file(out / "manifest.json", to_json(m));

  if (stats) {
    *stats = {};
    stats->samples = n;
    for (const auto& v : anns)
      for (const Annotation& a : v) {
        ++stats->instances;
        stats->visibility_histogram[std::min(4, static_cast<int>(a.visible_fraction * 5.0))]++;
      }
  }
  return m;
}

}  // namespace berrypose
