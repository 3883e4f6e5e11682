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
/// \brief Training loss for one image's prediction grid.
///
///   total = w_coord * coord + w_dim * dim + w_conf * conf + w_conf_no * conf_no
///
/// coord   squared keypoint error in grid units over responsible slots
/// dim     squared metric size error over responsible slots
/// conf    (C - sigmoid(p_o))^2 over responsible slots, C from confidence_target
/// conf_no sigmoid(p_o)^2 over every other slot
///
/// Gradients are taken w.r.t. the raw grid values; C is held constant.
/// The symmetric variant replaces each instance's target by the member of its
/// rotational orbit (about the box y axis) giving the lowest loss.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/error.hpp"
#include "berrypose/geometry.hpp"

namespace berrypose {

struct LossWeights {
  double coord = 1.0;
  double dim = 5.0;
  double conf = 5.0;
  double conf_no = 0.1;

  void validate() const {
    for (double w : {coord, dim, conf, conf_no})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossBreakdown {
  double coord = 0.0;
  double dim = 0.0;
  double conf = 0.0;
  double conf_no = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    coord += o.coord;
    dim += o.dim;
    conf += o.conf;
    conf_no += o.conf_no;
    total += o.total;
    return *this;
  }
  LossBreakdown& operator*=(double s) {
    coord *= s;
    dim *= s;
    conf *= s;
    conf_no *= s;
    total *= s;
    return *this;
  }
};

inline LossBreakdown combine(LossBreakdown parts, const LossWeights& w) {
  parts.total = w.coord * parts.coord + w.dim * parts.dim + w.conf * parts.conf +
                w.conf_no * parts.conf_no;
  return parts;
}

namespace detail {

template <class T>
std::span<const T, kValuesPerAnchor> cslot(const GridTensor<T>& t, int idx) {
  return t.slot(idx);
}

inline int slot_of(const ResponsibleSlot& s, const GridSpec& g) {
  return g.slot_index(s.cell_y, s.cell_x, s.anchor);
}

// Per-slot pieces, all in double. `grad` (22 values) receives scale * d/draw.
template <class T>
double coord_term(std::span<const T, kValuesPerAnchor> pred,
                  std::span<const double, kValuesPerAnchor> target, int cy, int cx, T* grad,
                  double scale) {
  double sum = 0.0;
  for (int k = 0; k < kNumKeypoints; ++k) {
    for (int axis = 0; axis < 2; ++axis) {
      const int idx = 2 * k + axis;
      const double c = axis == 0 ? cx : cy;
      double p, t;
      double dp = 1.0;
      if (k == 0) {
        const double s = sigmoid(static_cast<double>(pred[idx]));
        p = s + c;
        t = sigmoid(target[idx]) + c;
        dp = s * (1.0 - s);
      } else {
        p = static_cast<double>(pred[idx]) + c;
        t = target[idx] + c;
      }
      const double d = p - t;
      sum += d * d;
      if (grad) grad[idx] += static_cast<T>(scale * 2.0 * d * dp);
    }
  }
  return sum;
}

template <class T>
double dim_term(std::span<const T, kValuesPerAnchor> pred,
                std::span<const double, kValuesPerAnchor> target, const MeanSize& means, T* grad,
                double scale) {
  const double mean[3] = {means.h, means.w, means.l};
  double sum = 0.0;
  for (int j = 0; j < 3; ++j) {
    const int idx = kSizeH + j;
    const double p = mean[j] * std::exp(static_cast<double>(pred[idx]));
    const double t = mean[j] * std::exp(target[idx]);
    sum += (p - t) * (p - t);
    if (grad) grad[idx] += static_cast<T>(scale * 2.0 * (p - t) * p);
  }
  return sum;
}

template <class T>
double obj_term(T raw, double c, T* grad, double scale) {
  const double s = sigmoid(static_cast<double>(raw));
  if (grad) *grad += static_cast<T>(scale * -2.0 * (c - s) * s * (1.0 - s));
  return (c - s) * (c - s);
}

template <class T>
double noobj_term(T raw, T* grad, double scale) {
  const double s = sigmoid(static_cast<double>(raw));
  if (grad) *grad += static_cast<T>(scale * 2.0 * s * s * (1.0 - s));
  return s * s;
}

inline std::span<const double, kValuesPerAnchor> target_slot(const TargetTensor& t, int idx) {
  return cslot(t.values, idx);
}

}  // namespace detail

template <class T>
void check_loss_shapes(const GridTensor<T>& pred, const TargetTensor& t, const GridSpec& g) {
  if (!pred.matches(g) || !t.values.matches(g) || t.mask.size() != static_cast<std::size_t>(g.slots()))
    throw ShapeError("loss: prediction and target shapes differ from the grid");
}

/// Unweighted coordinate term. Optional gradient is accumulated with `scale`.
template <class T>
double coord_loss(const GridTensor<T>& pred, const TargetTensor& t, const GridSpec& g,
                  GridTensor<T>* grad = nullptr, double scale = 1.0) {
  check_loss_shapes(pred, t, g);
  double sum = 0.0;
  for (const ResponsibleSlot& s : t.slots) {
    const int idx = detail::slot_of(s, g);
    sum += detail::coord_term(detail::cslot(pred, idx), detail::target_slot(t, idx), s.cell_y,
                              s.cell_x, grad ? grad->slot(idx).data() : static_cast<T*>(nullptr),
                              scale);
  }
  return sum;
}

template <class T>
double dim_loss(const GridTensor<T>& pred, const TargetTensor& t, const GridSpec& g,
                const MeanSize& means, GridTensor<T>* grad = nullptr, double scale = 1.0) {
  check_loss_shapes(pred, t, g);
  double sum = 0.0;
  for (const ResponsibleSlot& s : t.slots) {
    const int idx = detail::slot_of(s, g);
    sum += detail::dim_term(detail::cslot(pred, idx), detail::target_slot(t, idx), means,
                            grad ? grad->slot(idx).data() : static_cast<T*>(nullptr), scale);
  }
  return sum;
}

/// Confidence targets for the responsible slots of `t`, in `t.slots` order,
/// measured between the current prediction and the target keypoints.
template <class T>
std::vector<double> confidence_targets(const GridTensor<T>& pred, const TargetTensor& t,
                                       const GridSpec& g, const CodecConfig& codec) {
  std::vector<double> out;
  out.reserve(t.slots.size());
  for (const ResponsibleSlot& s : t.slots) {
    const int idx = detail::slot_of(s, g);
    const Keypoints2D p = decode_keypoints(detail::cslot(pred, idx), s.cell_y, s.cell_x, g);
    const Keypoints2D q = decode_keypoints(detail::target_slot(t, idx), s.cell_y, s.cell_x, g);
    out.push_back(confidence_target(p, q, codec.distance_threshold, codec.alpha));
  }
  return out;
}

/// (objectness, no-object) terms. `c` holds one target per entry of t.slots.
template <class T>
std::pair<double, double> conf_loss(const GridTensor<T>& pred, std::span<const double> c,
                                    const TargetTensor& t, const GridSpec& g,
                                    GridTensor<T>* grad = nullptr, double obj_scale = 1.0,
                                    double noobj_scale = 1.0) {
  check_loss_shapes(pred, t, g);
  if (c.size() != t.slots.size()) throw ShapeError("conf_loss: one target per responsible slot");
  double obj = 0.0, noobj = 0.0;
  for (std::size_t i = 0; i < t.slots.size(); ++i) {
    const int idx = detail::slot_of(t.slots[i], g);
    obj += detail::obj_term(detail::cslot(pred, idx)[kConfidence], c[i],
                            grad ? &grad->slot(idx)[kConfidence] : static_cast<T*>(nullptr),
                            obj_scale);
  }
  for (int idx = 0; idx < g.slots(); ++idx) {
    if (t.mask[static_cast<std::size_t>(idx)]) continue;
    noobj += detail::noobj_term(detail::cslot(pred, idx)[kConfidence],
                                grad ? &grad->slot(idx)[kConfidence] : static_cast<T*>(nullptr),
                                noobj_scale);
  }
  return {obj, noobj};
}

/// Full weighted loss. With `grad`, d(total)/d(raw) * `scale` is accumulated.
/// `fixed_c` overrides the confidence targets (used to freeze them).
template <class T>
LossBreakdown total_loss(const GridTensor<T>& pred, const TargetTensor& t, const GridSpec& g,
                         const MeanSize& means, const LossWeights& w, const CodecConfig& codec,
                         GridTensor<T>* grad = nullptr, double scale = 1.0,
                         std::optional<std::span<const double>> fixed_c = std::nullopt) {
  LossBreakdown parts;
  parts.coord = coord_loss(pred, t, g, grad, scale * w.coord);
  parts.dim = dim_loss(pred, t, g, means, grad, scale * w.dim);
  std::vector<double> c;
  if (fixed_c) {
    c.assign(fixed_c->begin(), fixed_c->end());
  } else {
    c = confidence_targets(pred, t, g, codec);
  }
  std::tie(parts.conf, parts.conf_no) = conf_loss(pred, std::span<const double>(c), t, g, grad,
                                                  scale * w.conf, scale * w.conf_no);
  return combine(parts, w);
}

struct SymmetricLossResult {
  LossBreakdown loss;
  TargetTensor targets;        ///< targets built from the selected orbit members
  std::vector<int> member;     ///< selected orbit member per instance, -1 if skipped
};

/// Loss with each instance supervised by its best orbit member.
///
/// `orbits[m][i]` is instance m's keypoints under the i-th rotation about its
/// symmetry axis. Instances are assigned slots in list order exactly as in
/// build_targets. Instances whose centers share a cell compete for anchors, so
/// their members are chosen jointly by exhaustive search over that cell (up to
/// `max_joint` combinations, greedy beyond); different cells are independent.
/// The result therefore equals the minimum of total_loss over all orbit
/// combinations whenever every cell stays within `max_joint`.
template <class T>
SymmetricLossResult symmetric_loss(const GridTensor<T>& pred,
                                   std::span<const std::vector<InstanceKeypoints>> orbits,
                                   const GridSpec& g, const AnchorSet& anchors,
                                   const MeanSize& means, const LossWeights& w,
                                   const CodecConfig& codec, long max_joint = 1 << 16) {
  if (!pred.matches(g)) throw ShapeError("symmetric_loss: prediction shape differs from the grid");
  if (static_cast<int>(anchors.size()) != g.anchors)
    throw ShapeError("symmetric_loss: anchor set size differs from grid anchors");
  const int M = static_cast<int>(orbits.size());
  std::vector<int> chosen(M, -1);

  // Slot contribution of member i of instance m at anchor a of its cell,
  // excluding the no-object baseline that every slot pays.
  auto contribution = [&](int m, int i, int cy, int cx, int a) {
    const InstanceKeypoints& inst = orbits[m][i];
    const auto raw = encode_slot(inst, cy, cx, g, means);
    const std::span<const double, kValuesPerAnchor> tgt(raw);
    const int idx = g.slot_index(cy, cx, a);
    const auto p = detail::cslot(pred, idx);
    const double coord = detail::coord_term<T>(p, tgt, cy, cx, nullptr, 1.0);
    const double dim = detail::dim_term<T>(p, tgt, means, nullptr, 1.0);
    const Keypoints2D pk = decode_keypoints(p, cy, cx, g);
    const Keypoints2D tk = decode_keypoints(tgt, cy, cx, g);
    const double c = confidence_target(pk, tk, codec.distance_threshold, codec.alpha);
    const double obj = detail::obj_term<T>(p[kConfidence], c, nullptr, 1.0);
    const double noobj = detail::noobj_term<T>(p[kConfidence], nullptr, 1.0);
    return w.coord * coord + w.dim * dim + w.conf * obj - w.conf_no * noobj;
  };

  std::map<std::pair<int, int>, std::vector<int>> by_cell;
  for (int m = 0; m < M; ++m) {
    if (orbits[m].empty()) throw ConfigError("symmetric_loss: empty orbit");
    if (auto cell = center_cell(orbits[m][0].pixels[0], g)) by_cell[*cell].push_back(m);
  }

  for (const auto& [cell, members] : by_cell) {
    const auto [cy, cx] = cell;
    const int k = static_cast<int>(members.size());
    // cache[j][i][a]
    std::vector<std::vector<std::vector<double>>> cache(k);
    std::vector<std::vector<std::vector<int>>> pref(k);
    for (int j = 0; j < k; ++j) {
      const int m = members[j];
      const int n = static_cast<int>(orbits[m].size());
      cache[j].assign(n, std::vector<double>(g.anchors, std::numeric_limits<double>::quiet_NaN()));
      pref[j].resize(n);
      for (int i = 0; i < n; ++i) pref[j][i] = anchor_preference(orbits[m][i].pixels, anchors);
    }
    auto cost = [&](int j, int i, int a) {
      double& v = cache[j][i][a];
      if (std::isnan(v)) v = contribution(members[j], i, cy, cx, a);
      return v;
    };
    // Evaluates a joint choice; anchors are claimed in instance order.
    auto evaluate = [&](const std::vector<int>& pick) {
      std::vector<std::uint8_t> used(g.anchors, 0);
      double sum = 0.0;
      for (int j = 0; j < k; ++j) {
        for (int a : pref[j][pick[j]]) {
          if (used[a]) continue;
          used[a] = 1;
          sum += cost(j, pick[j], a);
          break;
        }
      }
      return sum;
    };

    long combos = 1;
    bool joint = true;
    for (int j = 0; j < k && joint; ++j) {
      combos *= static_cast<long>(orbits[members[j]].size());
      if (combos > max_joint) joint = false;
    }
    std::vector<int> best(k, 0);
    if (joint) {
      std::vector<int> pick(k, 0);
      double best_cost = std::numeric_limits<double>::infinity();
      for (long c = 0; c < combos; ++c) {
        const double v = evaluate(pick);
        if (v < best_cost) {
          best_cost = v;
          best = pick;
        }
        for (int j = k - 1; j >= 0; --j) {
          if (++pick[j] < static_cast<int>(orbits[members[j]].size())) break;
          pick[j] = 0;
        }
      }
    } else {
      std::vector<std::uint8_t> used(g.anchors, 0);
      for (int j = 0; j < k; ++j) {
        double best_cost = std::numeric_limits<double>::infinity();
        int best_anchor = -1;
        for (int i = 0; i < static_cast<int>(orbits[members[j]].size()); ++i) {
          for (int a : pref[j][i]) {
            if (used[a]) continue;
            const double v = cost(j, i, a);
            if (v < best_cost) {
              best_cost = v;
              best[j] = i;
              best_anchor = a;
            }
            break;
          }
        }
        if (best_anchor >= 0) used[best_anchor] = 1;
      }
    }
    for (int j = 0; j < k; ++j) chosen[members[j]] = best[j];
  }

  std::vector<InstanceKeypoints> picked;
  picked.reserve(M);
  for (int m = 0; m < M; ++m) picked.push_back(orbits[m][chosen[m] < 0 ? 0 : chosen[m]]);
  SymmetricLossResult out;
  out.targets = build_targets(picked, g, anchors, means);
  out.member = chosen;
  std::vector<std::uint8_t> kept(M, 0);
  for (const ResponsibleSlot& s : out.targets.slots) kept[s.instance] = 1;
  for (int m = 0; m < M; ++m)
    if (!kept[m]) out.member[m] = -1;
  out.loss = total_loss(pred, out.targets, g, means, w, codec);
  return out;
}

/// Orbit keypoints for each box: n rotations about its symmetry axis,
/// projected with `k`. Boxes behind the camera are dropped.
inline std::vector<std::vector<InstanceKeypoints>> orbit_keypoints(
    std::span<const OrientedBox3D> boxes, const CameraIntrinsics& k, int n) {
  std::vector<std::vector<InstanceKeypoints>> out;
  for (const OrientedBox3D& b : boxes) {
    std::vector<InstanceKeypoints> orbit;
    try {
      for (const OrientedBox3D& m : symmetry_expand(b, n))
        orbit.push_back({project_keypoints(m, k), m.size});
    } catch (const BehindCameraError&) {
      continue;
    }
    out.push_back(std::move(orbit));
  }
  return out;
}

template <class T>
SymmetricLossResult symmetric_loss(const GridTensor<T>& pred, std::span<const OrientedBox3D> boxes,
                                   const CameraIntrinsics& k, const GridSpec& g,
                                   const AnchorSet& anchors, const MeanSize& means,
                                   const LossWeights& w, const CodecConfig& codec, int n = 12) {
  if (n < 1) throw ConfigError("symmetric_loss: n must be >= 1");
  const auto orbits = orbit_keypoints(boxes, k, n);
  return symmetric_loss(pred, std::span<const std::vector<InstanceKeypoints>>(orbits), g, anchors,
                        means, w, codec);
}

}  // namespace berrypose
