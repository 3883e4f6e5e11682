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
/// \brief Image/keypoint augmentation and conversion to network input.
///
/// Geometry is one axis-aligned affine map of pixel coordinates
/// (resize, zoom about the image center plus shift, optional mirror). The
/// image is resampled through its inverse and supervision keypoints through
/// the map itself, so the two never disagree.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/dataset.hpp"
#include "berrypose/error.hpp"
#include "berrypose/geometry.hpp"
#include "berrypose/image_io.hpp"
#include "berrypose/loss.hpp"

namespace berrypose {

struct AugmentConfig {
  bool flip = true;
  bool scale = true;
  bool crop = true;
  bool color = true;
  double scale_min = 0.8;
  double scale_max = 1.3;
  double hue = 0.04;         ///< max hue shift, fraction of the color wheel
  double saturation = 0.3;   ///< saturation factor in [1 - s, 1 + s]
  double brightness = 0.3;   ///< value factor in [1 - b, 1 + b]
  int max_crop_tries = 10;

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("augment: bad scale range");
    if (!(hue >= 0.0 && hue <= 0.5)) throw ConfigError("augment: hue in [0, 0.5]");
    if (!(saturation >= 0.0 && saturation < 1.0)) throw ConfigError("augment: saturation in [0, 1)");
    if (!(brightness >= 0.0 && brightness < 1.0)) throw ConfigError("augment: brightness in [0, 1)");
    if (max_crop_tries < 1) throw ConfigError("augment: max_crop_tries must be >= 1");
  }
};

/// Parameters drawn for one sample.
struct AugmentSteps {
  double zoom = 1.0;
  double shift_x = 0.0, shift_y = 0.0;  ///< output pixels, applied after zoom
  bool flipped = false;
  double hue = 0.0, saturation = 1.0, brightness = 1.0;
  int tries = 0;
  bool fallback = false;  ///< every crop attempt lost all instances
};

/// u' = a.x * u + b.x, v' = a.y * v + b.y
struct AxisAffine {
  Vec2 a = Vec2::Ones();
  Vec2 b = Vec2::Zero();

  Vec2 apply(const Vec2& p) const { return a.cwiseProduct(p) + b; }
  Mat3 matrix() const {
    Mat3 m = Mat3::Identity();
    m(0, 0) = a.x();
    m(1, 1) = a.y();
    m(0, 2) = b.x();
    m(1, 2) = b.y();
    return m;
  }
  /// this after o
  AxisAffine operator*(const AxisAffine& o) const {
    return {a.cwiseProduct(o.a), a.cwiseProduct(o.b) + b};
  }
};

/// Pixel-center aligned resize from (w0, h0) to (w1, h1).
inline AxisAffine resize_map(int w0, int h0, int w1, int h1) {
  const Vec2 r(static_cast<double>(w1) / w0, static_cast<double>(h1) / h0);
  return {r, 0.5 * r - Vec2(0.5, 0.5)};
}

inline AxisAffine zoom_map(int w, int h, double zoom, double sx, double sy) {
  const Vec2 c(0.5 * (w - 1), 0.5 * (h - 1));
  return {Vec2(zoom, zoom), c - zoom * c + Vec2(sx, sy)};
}

inline AxisAffine flip_map(int w) { return {Vec2(-1.0, 1.0), Vec2(w - 1.0, 0.0)}; }

/// Corner k of the mirrored image is corner k ^ 1 of the original box.
inline Keypoints2D relabel_mirrored(const Keypoints2D& k) {
  Keypoints2D out;
  out[0] = k[0];
  for (int c = 0; c < kNumCorners; ++c) out[1 + (c ^ 1)] = k[1 + c];
  return out;
}

inline Keypoints2D flip_keypoints(const Keypoints2D& k, int width) {
  Keypoints2D m;
  for (int i = 0; i < kNumKeypoints; ++i) m[i] = Vec2(width - 1.0 - k[i].x(), k[i].y());
  return relabel_mirrored(m);
}

inline Keypoints2D map_keypoints(const Keypoints2D& k, const AxisAffine& m) {
  Keypoints2D out;
  for (int i = 0; i < kNumKeypoints; ++i) out[i] = m.apply(k[i]);
  return m.a.x() < 0.0 ? relabel_mirrored(out) : out;
}

inline CameraIntrinsics map_intrinsics(const CameraIntrinsics& k, const AxisAffine& m, int w, int h) {
  return {std::abs(m.a.x()) * k.fx, std::abs(m.a.y()) * k.fy, m.a.x() * k.cx + m.b.x(),
          m.a.y() * k.cy + m.b.y(), w, h};
}

/// Network-ready sample: planar float RGB in [0, 1] plus supervision orbits.
struct TrainSample {
  int width = 0, height = 0;
  std::vector<float> image;  ///< 3 x height x width
  std::vector<std::vector<InstanceKeypoints>> orbits;
  CameraIntrinsics intrinsics;
  AxisAffine transform;  ///< source pixels -> output pixels
  AugmentSteps steps;
};

namespace detail {

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0f + (b - r) / d;
  else h = 4.0f + (r - g) / d;
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  const float x = h * 6.0f;
  const int i = static_cast<int>(x) % 6;
  const float f = x - std::floor(x);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

// Bilinear resample of `src` through the inverse of `m`; outside is mid gray.
inline std::vector<float> warp(const RgbImage& src, const AxisAffine& m, int w, int h) {
  std::vector<float> out(static_cast<std::size_t>(3) * w * h);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<int> x0(w);
  std::vector<float> fx(w);
  std::vector<char> xin(w);
  for (int x = 0; x < w; ++x) {
    const double s = (x - m.b.x()) / m.a.x();
    x0[x] = static_cast<int>(std::floor(s));
    fx[x] = static_cast<float>(s - x0[x]);
    xin[x] = s > -1.0 && s < src.width;
  }
  auto px = [&](int x, int y, int c) -> float {
    if (x < 0 || y < 0 || x >= src.width || y >= src.height) return 0.5f;
    return src.at(x, y)[c] * (1.0f / 255.0f);
  };
  for (int y = 0; y < h; ++y) {
    const double sy = (y - m.b.y()) / m.a.y();
    const int y0 = static_cast<int>(std::floor(sy));
    const float fy = static_cast<float>(sy - y0);
    const bool yin = sy > -1.0 && sy < src.height;
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        float v = 0.5f;
        if (yin && xin[x]) {
          const float a = px(x0[x], y0, c) * (1 - fx[x]) + px(x0[x] + 1, y0, c) * fx[x];
          const float b = px(x0[x], y0 + 1, c) * (1 - fx[x]) + px(x0[x] + 1, y0 + 1, c) * fx[x];
          v = a * (1 - fy) + b * fy;
        }
        out[c * plane + p] = v;
      }
    }
  }
  return out;
}

inline void color_jitter(std::vector<float>& img, std::size_t plane, double dh, double ds, double dv) {
  for (std::size_t p = 0; p < plane; ++p) {
    float h, s, v;
    rgb_to_hsv(img[p], img[plane + p], img[2 * plane + p], h, s, v);
    h += static_cast<float>(dh);
    s = std::clamp(s * static_cast<float>(ds), 0.0f, 1.0f);
    v = std::clamp(v * static_cast<float>(dv), 0.0f, 1.0f);
    hsv_to_rgb(h, s, v, img[p], img[plane + p], img[2 * plane + p]);
  }
}

inline bool center_inside(const Vec2& c, int w, int h) {
  return c.x() >= 0.0 && c.y() >= 0.0 && c.x() < w && c.y() < h;
}

}  // namespace detail

/// Resizes `s` to (w, h), optionally augmenting with `cfg` and `rng`.
/// Orbits hold `orbit_n` rotations of each annotated box about its axis.
inline TrainSample prepare_sample(const LoadedSample& s, int w, int h, const AugmentConfig* cfg = nullptr,
                                  std::mt19937_64* rng = nullptr, int orbit_n = 12) {
  if (cfg && !rng) throw ConfigError("augment: rng required");
  if (cfg) cfg->validate();
  const CameraIntrinsics& k = s.ann.intrinsics;
  const auto orbits_src = orbit_keypoints(s.boxes(), k, orbit_n);
  const AxisAffine base = resize_map(s.rgb.width, s.rgb.height, w, h);

  TrainSample out;
  out.width = w;
  out.height = h;
  AugmentSteps st;
  AxisAffine geo;
  std::vector<std::vector<InstanceKeypoints>> kept;
  auto try_map = [&](const AxisAffine& m) {
    kept.clear();
    for (const auto& orbit : orbits_src) {
      if (!detail::center_inside(m.apply(orbit[0].pixels[0]), w, h)) continue;
      std::vector<InstanceKeypoints> o;
      for (const InstanceKeypoints& ik : orbit) o.push_back({map_keypoints(ik.pixels, m), ik.size});
      kept.push_back(std::move(o));
    }
  };
  std::size_t visible_before = 0;
  for (const auto& orbit : orbits_src)
    visible_before += detail::center_inside(base.apply(orbit[0].pixels[0]), w, h);

  if (cfg) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    st.flipped = cfg->flip && u01(*rng) < 0.5;
    const AxisAffine flip = st.flipped ? flip_map(w) : AxisAffine{};
    bool done = false;
    for (int t = 0; t < cfg->max_crop_tries && !done; ++t) {
      st.tries = t + 1;
      st.zoom = cfg->scale ? std::exp(std::log(cfg->scale_min) +
                                      u01(*rng) * (std::log(cfg->scale_max) - std::log(cfg->scale_min)))
                           : 1.0;
      const double rx = std::abs(st.zoom - 1.0) * 0.5 * w, ry = std::abs(st.zoom - 1.0) * 0.5 * h;
      st.shift_x = cfg->crop ? (2.0 * u01(*rng) - 1.0) * rx : 0.0;
      st.shift_y = cfg->crop ? (2.0 * u01(*rng) - 1.0) * ry : 0.0;
      geo = flip * zoom_map(w, h, st.zoom, st.shift_x, st.shift_y) * base;
      try_map(geo);
      done = kept.size() > 0 || visible_before == 0;
    }
    if (!done) {
      st.fallback = true;
      st.zoom = 1.0;
      st.shift_x = st.shift_y = 0.0;
      geo = flip * base;
      try_map(geo);
    }
    if (cfg->color) {
      st.hue = (2.0 * u01(*rng) - 1.0) * cfg->hue;
      st.saturation = 1.0 + (2.0 * u01(*rng) - 1.0) * cfg->saturation;
      st.brightness = 1.0 + (2.0 * u01(*rng) - 1.0) * cfg->brightness;
    }
  } else {
    geo = base;
    try_map(geo);
  }

  out.image = detail::warp(s.rgb, geo, w, h);
  if (cfg && cfg->color)
    detail::color_jitter(out.image, static_cast<std::size_t>(w) * h, st.hue, st.saturation, st.brightness);
  out.orbits = std::move(kept);
  out.intrinsics = map_intrinsics(k, geo, w, h);
  out.transform = geo;
  out.steps = st;
  return out;
}

/// Planar float image from an 8-bit RGB image resized to (w, h).
inline std::vector<float> to_input(const RgbImage& img, int w, int h) {
  return detail::warp(img, resize_map(img.width, img.height, w, h), w, h);
}

}  // namespace berrypose
