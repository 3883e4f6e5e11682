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
/// \brief Mapping between annotated boxes and the S_y x S_x x A x 22 grid.
///
/// Per-anchor layout (grid units = pixels / stride, relative to the cell's
/// top-left corner (c_x, c_y)):
///
///   [0]  t_x0   center x, decoded as sigmoid(t_x0) + c_x
///   [1]  t_y0   center y, decoded as sigmoid(t_y0) + c_y
///   [2k], [2k+1] for k = 1..8   corner k offsets, decoded as t + c
///   [18] t_h  [19] t_w  [20] t_l   log-size residuals, h = mean_h * exp(t_h)
///   [21] p_o    confidence logit, decoded as sigmoid(p_o)
///
/// Anchors only select which of the A slots in a cell supervises an instance;
/// they do not enter the decode path.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "berrypose/error.hpp"
#include "berrypose/geometry.hpp"

namespace berrypose {

inline constexpr int kValuesPerAnchor = 22;
inline constexpr int kCenterX = 0;
inline constexpr int kCenterY = 1;
inline constexpr int kSizeH = 18;
inline constexpr int kSizeW = 19;
inline constexpr int kSizeL = 20;
inline constexpr int kConfidence = 21;

/// Index of the x value of keypoint k (0 = center, 1..8 = corners).
constexpr int keypoint_x_index(int k) { return 2 * k; }
constexpr int keypoint_y_index(int k) { return 2 * k + 1; }

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Inverse sigmoid; the exact endpoints 0 and 1 map to -10 and +10.
inline double logit(double p) {
  if (p <= 0.0) return -10.0;
  if (p >= 1.0) return 10.0;
  return std::log(p / (1.0 - p));
}

struct GridSpec {
  int width = 416;
  int height = 416;
  int stride = 32;
  int cells_x = 13;
  int cells_y = 13;
  int anchors = 5;

  static GridSpec make(int width, int height, int stride, int anchors) {
    if (stride <= 0 || width <= 0 || height <= 0)
      throw ConfigError("grid: width, height and stride must be positive");
    if (width % stride != 0 || height % stride != 0)
      throw ConfigError("grid: input resolution " + std::to_string(width) + "x" +
                        std::to_string(height) + " is not divisible by stride " +
                        std::to_string(stride));
    if (anchors < 1) throw ConfigError("grid: need at least one anchor");
    return {width, height, stride, width / stride, height / stride, anchors};
  }
  int slots() const { return cells_x * cells_y * anchors; }
  int slot_index(int cy, int cx, int a) const { return (cy * cells_x + cx) * anchors + a; }
  bool operator==(const GridSpec&) const = default;
};

struct Anchor {
  double w = 0.0;  ///< pixels
  double h = 0.0;  ///< pixels
  double area() const { return w * h; }
};

/// 2D priors over the bounding rectangle of an instance's nine keypoints.
class AnchorSet {
 public:
  AnchorSet() = default;
  explicit AnchorSet(std::vector<Anchor> priors) : priors_(std::move(priors)) {
    if (priors_.empty()) throw ConfigError("anchors: empty set");
    for (const Anchor& a : priors_)
      if (!(a.w > 0.0 && a.h > 0.0)) throw ConfigError("anchors: priors must be positive");
    std::stable_sort(priors_.begin(), priors_.end(),
                     [](const Anchor& a, const Anchor& b) { return a.area() < b.area(); });
  }

  /// Square priors spread geometrically between `min_px` and `max_px`.
  static AnchorSet geometric(int count, double min_px, double max_px) {
    std::vector<Anchor> p;
    for (int i = 0; i < count; ++i) {
      const double t = count == 1 ? 0.5 : static_cast<double>(i) / (count - 1);
      const double s = min_px * std::pow(max_px / min_px, t);
      p.push_back({s, s});
    }
    return AnchorSet(std::move(p));
  }

  std::size_t size() const { return priors_.size(); }
  const Anchor& operator[](std::size_t i) const { return priors_[i]; }
  const std::vector<Anchor>& priors() const { return priors_; }

 private:
  std::vector<Anchor> priors_;
};

/// Dataset-average box size used by the exponential size decoding.
struct MeanSize {
  double h = 0.034;
  double w = 0.027;
  double l = 0.027;
  bool valid() const { return h > 0.0 && w > 0.0 && l > 0.0; }
};

/// Axis-aligned pixel rectangle.
struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
};

inline Rect hull_rect(const Keypoints2D& kps) {
  Rect r{kps[0].x(), kps[0].y(), kps[0].x(), kps[0].y()};
  for (const Vec2& p : kps) {
    r.x0 = std::min(r.x0, p.x());
    r.y0 = std::min(r.y0, p.y());
    r.x1 = std::max(r.x1, p.x());
    r.y1 = std::max(r.y1, p.y());
  }
  return r;
}

inline double rect_iou(const Rect& a, const Rect& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// IoU of two rectangles of the given extents, both centered at the origin.
inline double centered_iou(double w0, double h0, double w1, double h1) {
  const double inter = std::min(w0, w1) * std::min(h0, h1);
  const double uni = w0 * h0 + w1 * h1 - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// k-means over hull extents with the 1 - IoU distance (k-means++ seeding).
inline AnchorSet fit_anchors(std::span<const Anchor> hulls, int k, std::uint64_t seed,
                             int iterations = 100) {
  if (k < 1) throw ConfigError("fit_anchors: k must be >= 1");
  if (static_cast<int>(hulls.size()) < k)
    throw ConfigError("fit_anchors: fewer hulls than anchors");
  std::mt19937_64 rng(seed);
  std::vector<Anchor> centers;
  centers.push_back(hulls[std::uniform_int_distribution<std::size_t>(0, hulls.size() - 1)(rng)]);
  std::vector<double> d2(hulls.size());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < hulls.size(); ++i) {
      double best = 1.0;
      for (const Anchor& c : centers)
        best = std::min(best, 1.0 - centered_iou(hulls[i].w, hulls[i].h, c.w, c.h));
      d2[i] = best * best;
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < hulls.size() && r > d2[pick]; ++pick) r -= d2[pick];
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, hulls.size() - 1)(rng);
    }
    centers.push_back(hulls[pick]);
  }
  std::vector<int> assign(hulls.size(), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < hulls.size(); ++i) {
      int best = 0;
      double best_iou = -1.0;
      for (int c = 0; c < k; ++c) {
        const double iou = centered_iou(hulls[i].w, hulls[i].h, centers[c].w, centers[c].h);
        if (iou > best_iou) {
          best_iou = iou;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    std::vector<Anchor> sum(k);
    std::vector<int> count(k, 0);
    for (std::size_t i = 0; i < hulls.size(); ++i) {
      sum[assign[i]].w += hulls[i].w;
      sum[assign[i]].h += hulls[i].h;
      ++count[assign[i]];
    }
    for (int c = 0; c < k; ++c)
      if (count[c] > 0) centers[c] = {sum[c].w / count[c], sum[c].h / count[c]};
    if (!changed) break;
  }
  for (Anchor& c : centers) {
    c.w = std::max(c.w, 1e-3);
    c.h = std::max(c.h, 1e-3);
  }
  return AnchorSet(std::move(centers));
}

/// Dense S_y x S_x x A x 22 array.
template <class T>
class GridTensor {
 public:
  GridTensor() = default;
  GridTensor(int cells_y, int cells_x, int anchors, T fill = T(0))
      : cells_y_(cells_y),
        cells_x_(cells_x),
        anchors_(anchors),
        data_(static_cast<std::size_t>(cells_y) * cells_x * anchors * kValuesPerAnchor, fill) {}
  explicit GridTensor(const GridSpec& g, T fill = T(0))
      : GridTensor(g.cells_y, g.cells_x, g.anchors, fill) {}

  int cells_y() const { return cells_y_; }
  int cells_x() const { return cells_x_; }
  int anchors() const { return anchors_; }
  bool matches(const GridSpec& g) const {
    return cells_y_ == g.cells_y && cells_x_ == g.cells_x && anchors_ == g.anchors;
  }

  T& at(int cy, int cx, int a, int k) { return data_[offset(cy, cx, a) + k]; }
  const T& at(int cy, int cx, int a, int k) const { return data_[offset(cy, cx, a) + k]; }
  std::span<T, kValuesPerAnchor> slot(int cy, int cx, int a) {
    return std::span<T, kValuesPerAnchor>(data_.data() + offset(cy, cx, a), kValuesPerAnchor);
  }
  std::span<const T, kValuesPerAnchor> slot(int cy, int cx, int a) const {
    return std::span<const T, kValuesPerAnchor>(data_.data() + offset(cy, cx, a),
                                                kValuesPerAnchor);
  }
  std::span<T, kValuesPerAnchor> slot(int index) {
    return std::span<T, kValuesPerAnchor>(
        data_.data() + static_cast<std::size_t>(index) * kValuesPerAnchor, kValuesPerAnchor);
  }
  std::span<const T, kValuesPerAnchor> slot(int index) const {
    return std::span<const T, kValuesPerAnchor>(
        data_.data() + static_cast<std::size_t>(index) * kValuesPerAnchor, kValuesPerAnchor);
  }
  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  std::size_t offset(int cy, int cx, int a) const {
    return ((static_cast<std::size_t>(cy) * cells_x_ + cx) * anchors_ + a) * kValuesPerAnchor;
  }

  int cells_y_ = 0;
  int cells_x_ = 0;
  int anchors_ = 0;
  std::vector<T> data_;
};

/// Supervision for one instance in keypoint space: the projected center and
/// corners (pixels) and the metric size.
struct InstanceKeypoints {
  Keypoints2D pixels;
  Size3D size;
};

struct ResponsibleSlot {
  int cell_y = 0;
  int cell_x = 0;
  int anchor = 0;
  int instance = 0;  ///< index into the instance list handed to build_targets
  Keypoints2D pixels;
  Size3D size;
};

struct TargetTensor {
  GridTensor<double> values;
  std::vector<std::uint8_t> mask;  ///< 1 where a slot is responsible
  std::vector<ResponsibleSlot> slots;
  int skipped_outside = 0;  ///< instances whose center projects off-image
  int collisions = 0;       ///< instances dropped because every anchor of the cell was taken

  bool responsible(const GridSpec& g, int cy, int cx, int a) const {
    return mask[static_cast<std::size_t>(g.slot_index(cy, cx, a))] != 0;
  }
};

/// Cell holding the projected center, or nullopt when it is off-image.
inline std::optional<std::pair<int, int>> center_cell(const Vec2& center, const GridSpec& g) {
  if (!(center.x() >= 0.0 && center.y() >= 0.0 && center.x() < g.width && center.y() < g.height))
    return std::nullopt;
  const int cx = std::min(static_cast<int>(std::floor(center.x() / g.stride)), g.cells_x - 1);
  const int cy = std::min(static_cast<int>(std::floor(center.y() / g.stride)), g.cells_y - 1);
  return std::make_pair(cy, cx);
}

/// Anchor indices ordered by decreasing centered IoU with the keypoint hull.
inline std::vector<int> anchor_preference(const Keypoints2D& kps, const AnchorSet& anchors) {
  const Rect hull = hull_rect(kps);
  std::vector<double> iou(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a)
    iou[a] = centered_iou(hull.width(), hull.height(), anchors[a].w, anchors[a].h);
  std::vector<int> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return iou[a] > iou[b]; });
  return order;
}

/// Raw 22-vector supervising `inst` from cell (cy, cx). The confidence entry is 0.
inline std::array<double, kValuesPerAnchor> encode_slot(const InstanceKeypoints& inst, int cy,
                                                        int cx, const GridSpec& g,
                                                        const MeanSize& means) {
  std::array<double, kValuesPerAnchor> t{};
  const double s = g.stride;
  t[kCenterX] = logit(inst.pixels[0].x() / s - cx);
  t[kCenterY] = logit(inst.pixels[0].y() / s - cy);
  for (int k = 1; k < kNumKeypoints; ++k) {
    t[keypoint_x_index(k)] = inst.pixels[k].x() / s - cx;
    t[keypoint_y_index(k)] = inst.pixels[k].y() / s - cy;
  }
  t[kSizeH] = std::log(inst.size.h / means.h);
  t[kSizeW] = std::log(inst.size.w / means.w);
  t[kSizeL] = std::log(inst.size.l / means.l);
  return t;
}

/// Keypoints in grid units (cell offsets applied) decoded from a raw slot.
template <class T>
std::array<T, 2 * kNumKeypoints> decode_grid_points(std::span<const T, kValuesPerAnchor> raw,
                                                    int cy, int cx) {
  std::array<T, 2 * kNumKeypoints> p;
  p[0] = sigmoid(raw[kCenterX]) + T(cx);
  p[1] = sigmoid(raw[kCenterY]) + T(cy);
  for (int k = 1; k < kNumKeypoints; ++k) {
    p[2 * k] = raw[keypoint_x_index(k)] + T(cx);
    p[2 * k + 1] = raw[keypoint_y_index(k)] + T(cy);
  }
  return p;
}

template <class T>
Keypoints2D decode_keypoints(std::span<const T, kValuesPerAnchor> raw, int cy, int cx,
                             const GridSpec& g) {
  const auto p = decode_grid_points(raw, cy, cx);
  Keypoints2D out;
  for (int k = 0; k < kNumKeypoints; ++k)
    out[k] = Vec2(static_cast<double>(p[2 * k]), static_cast<double>(p[2 * k + 1])) * g.stride;
  return out;
}

template <class T>
Size3D decode_size(std::span<const T, kValuesPerAnchor> raw, const MeanSize& means) {
  return {means.h * std::exp(static_cast<double>(raw[kSizeH])),
          means.w * std::exp(static_cast<double>(raw[kSizeW])),
          means.l * std::exp(static_cast<double>(raw[kSizeL]))};
}

/// Picks the responsible slot for `inst` given already-claimed slots. Returns
/// the slot index, or -1 on a full cell, or -2 when the center is off-image.
inline int assign_slot(const InstanceKeypoints& inst, const GridSpec& g, const AnchorSet& anchors,
                       std::span<const std::uint8_t> occupied) {
  const auto cell = center_cell(inst.pixels[0], g);
  if (!cell) return -2;
  for (int a : anchor_preference(inst.pixels, anchors)) {
    const int idx = g.slot_index(cell->first, cell->second, a);
    if (!occupied[static_cast<std::size_t>(idx)]) return idx;
  }
  return -1;
}

inline TargetTensor build_targets(std::span<const InstanceKeypoints> instances,
                                  const GridSpec& g, const AnchorSet& anchors,
                                  const MeanSize& means) {
  if (static_cast<int>(anchors.size()) != g.anchors)
    throw ShapeError("build_targets: anchor set size differs from grid anchors");
  TargetTensor t{GridTensor<double>(g), std::vector<std::uint8_t>(g.slots(), 0), {}, 0, 0};
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const InstanceKeypoints& inst = instances[i];
    const int idx = assign_slot(inst, g, anchors, t.mask);
    if (idx == -2) {
      ++t.skipped_outside;
      continue;
    }
    if (idx == -1) {
      ++t.collisions;
      continue;
    }
    const int a = idx % g.anchors;
    const int cell = idx / g.anchors;
    const int cy = cell / g.cells_x;
    const int cx = cell % g.cells_x;
    const auto raw = encode_slot(inst, cy, cx, g, means);
    std::copy(raw.begin(), raw.end(), t.values.slot(idx).begin());
    t.mask[static_cast<std::size_t>(idx)] = 1;
    t.slots.push_back({cy, cx, a, static_cast<int>(i), inst.pixels, inst.size});
  }
  return t;
}

/// Projects every box and builds targets from the resulting keypoints. Boxes
/// whose center lies behind the camera count as off-image.
inline TargetTensor build_targets(std::span<const OrientedBox3D> boxes, const CameraIntrinsics& k,
                                  const GridSpec& g, const AnchorSet& anchors,
                                  const MeanSize& means) {
  std::vector<InstanceKeypoints> inst;
  int behind = 0;
  for (const OrientedBox3D& b : boxes) {
    try {
      inst.push_back({project_keypoints(b, k), b.size});
    } catch (const BehindCameraError&) {
      ++behind;
    }
  }
  TargetTensor t = build_targets(inst, g, anchors, means);
  t.skipped_outside += behind;
  return t;
}

struct Detection {
  Keypoints2D keypoints;  ///< pixels; [0] is the projected center
  Size3D size;
  double confidence = 0.0;
  int cell_y = 0;
  int cell_x = 0;
  int anchor = 0;
  std::optional<Pose> pose;  ///< filled by PnP
  bool pose_failed = false;

  std::optional<OrientedBox3D> box() const {
    if (!pose) return std::nullopt;
    return OrientedBox3D{*pose, size};
  }
};

template <class T>
std::vector<Detection> decode(const GridTensor<T>& raw, const GridSpec& g, const MeanSize& means,
                              double conf_threshold) {
  if (!raw.matches(g))
    throw ShapeError("decode: prediction tensor shape does not match the grid");
  std::vector<Detection> out;
  for (int cy = 0; cy < g.cells_y; ++cy) {
    for (int cx = 0; cx < g.cells_x; ++cx) {
      for (int a = 0; a < g.anchors; ++a) {
        const auto s = raw.slot(cy, cx, a);
        const double conf = sigmoid(static_cast<double>(s[kConfidence]));
        if (!(conf >= conf_threshold)) continue;
        Detection d;
        d.keypoints = decode_keypoints(s, cy, cx, g);
        d.size = decode_size(s, means);
        d.confidence = conf;
        d.cell_y = cy;
        d.cell_x = cx;
        d.anchor = a;
        out.push_back(d);
      }
    }
  }
  return out;
}

inline double mean_keypoint_distance(const Keypoints2D& a, const Keypoints2D& b) {
  double sum = 0.0;
  for (int k = 0; k < kNumKeypoints; ++k) sum += (a[k] - b[k]).norm();
  return sum / kNumKeypoints;
}

/// Distance-based confidence target in [0, 1]: 1 at zero keypoint error,
/// falling exponentially to 0 at `d_th` pixels of mean error.
inline double confidence_target(const Keypoints2D& pred, const Keypoints2D& gt, double d_th,
                                double alpha) {
  const double d = mean_keypoint_distance(pred, gt);
  if (!(d < d_th)) return 0.0;
  return std::expm1(alpha * (1.0 - d / d_th)) / std::expm1(alpha);
}

inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.confidence > b.confidence;
  });
  std::vector<Detection> keep;
  std::vector<Rect> kept_hulls;
  for (Detection& d : dets) {
    const Rect h = hull_rect(d.keypoints);
    bool suppressed = false;
    for (const Rect& k : kept_hulls) {
      if (rect_iou(h, k) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept_hulls.push_back(h);
      keep.push_back(std::move(d));
    }
  }
  return keep;
}

/// Codec constants exposed in configuration files.
struct CodecConfig {
  double alpha = 2.0;
  double distance_threshold = 30.0;  ///< pixels
  double conf_threshold = 0.3;
  double nms_iou = 0.45;
};

}  // namespace berrypose
