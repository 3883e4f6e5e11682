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
/// \brief Wireframe overlays of projected boxes.

#pragma once

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "berrypose/geometry.hpp"
#include "berrypose/image_io.hpp"

namespace berrypose {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Color kPredictionColor{255, 140, 0};
inline constexpr Color kTruthColor{255, 255, 255};

namespace detail {

// Liang-Barsky against [0, w-1] x [0, h-1]. False when nothing is left.
inline bool clip_segment(Vec2& a, Vec2& b, int w, int h) {
  if (!a.allFinite() || !b.allFinite()) return false;
  const Vec2 d = b - a;
  double t0 = 0.0, t1 = 1.0;
  const double p[4] = {-d.x(), d.x(), -d.y(), d.y()};
  const double q[4] = {a.x(), w - 1.0 - a.x(), a.y(), h - 1.0 - a.y()};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
      continue;
    }
    const double t = q[i] / p[i];
    if (p[i] < 0.0) t0 = std::max(t0, t);
    else t1 = std::min(t1, t);
    if (t0 > t1) return false;
  }
  const Vec2 a0 = a;
  a = a0 + t0 * d;
  b = a0 + t1 * d;
  return true;
}

}  // namespace detail

/// Bresenham line; returns the number of pixels written.
inline int draw_line(RgbImage& img, Vec2 a, Vec2 b, Color c) {
  if (img.width <= 0 || img.height <= 0 || !detail::clip_segment(a, b, img.width, img.height)) return 0;
  int x0 = static_cast<int>(std::lround(a.x())), y0 = static_cast<int>(std::lround(a.y()));
  const int x1 = static_cast<int>(std::lround(b.x())), y1 = static_cast<int>(std::lround(b.y()));
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy, n = 0;
  for (;;) {
    if (x0 >= 0 && y0 >= 0 && x0 < img.width && y0 < img.height) {
      std::uint8_t* px = img.at(x0, y0);
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
      ++n;
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  return n;
}

/// Draws the 12 edges of a box given its 9 projected keypoints (center
/// first). Returns how many edges left at least one pixel in the image.
inline int draw_box(RgbImage& img, const Keypoints2D& k, Color c) {
  int edges = 0;
  for (const auto& [i, j] : kBoxEdges) edges += draw_line(img, k[1 + i], k[1 + j], c) > 0;
  return edges;
}

struct OverlayStats {
  int predictions = 0;
  int truths = 0;
  int prediction_edges = 0;
  int truth_edges = 0;
};

/// Ground truth first, predictions on top.
inline OverlayStats draw_overlay(RgbImage& img, const std::vector<Keypoints2D>& predictions,
                                 const std::vector<Keypoints2D>& truths) {
  OverlayStats s;
  for (const Keypoints2D& k : truths) {
    s.truth_edges += draw_box(img, k, kTruthColor);
    ++s.truths;
  }
  for (const Keypoints2D& k : predictions) {
    s.prediction_edges += draw_box(img, k, kPredictionColor);
    ++s.predictions;
  }
  return s;
}

}  // namespace berrypose
