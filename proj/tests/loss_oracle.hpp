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


// Loss fixtures and a scalar loop re-implementation of the loss, shared by the
// unit tests and the acceptance runner.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "berrypose/loss.hpp"
#include "test_support.hpp"

namespace berrypose::testing::lossfix {


inline const GridSpec kGrid = GridSpec::make(128, 128, 32, 3);
inline const AnchorSet kAnchors = AnchorSet::geometric(3, 10.0, 60.0);
inline const MeanSize kMeans{0.034, 0.027, 0.027};
inline const LossWeights kW{};
inline const CodecConfig kCodec{};

inline CameraIntrinsics small_camera() {
  CameraIntrinsics k;
  k.fx = k.fy = 300.0;
  k.cx = k.cy = 64.0;
  k.width = k.height = 128;
  return k;
}

inline GridTensor<double> random_pred(std::mt19937_64& rng, const GridSpec& g, double spread = 1.0) {
  GridTensor<double> t(g);
  std::normal_distribution<double> n(0.0, spread);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Prediction that is a noisy copy of the targets in responsible slots, so
// confidence targets are non-zero.
inline GridTensor<double> near_pred(std::mt19937_64& rng, const TargetTensor& t, double noise) {
  GridTensor<double> p = random_pred(rng, kGrid);
  std::normal_distribution<double> n(0.0, noise);
  for (int idx = 0; idx < kGrid.slots(); ++idx) {
    if (!t.mask[idx]) continue;
    for (int k = 0; k < kConfidence; ++k) p.slot(idx)[k] = t.values.slot(idx)[k] + n(rng);
  }
  return p;
}

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight loop re-implementation: every slot, every value, no helpers from
// the loss module.
struct LoopLoss {
  double coord = 0, dim = 0, conf = 0, conf_no = 0;
  double total(const LossWeights& w) const {
    return w.coord * coord + w.dim * dim + w.conf * conf + w.conf_no * conf_no;
  }
};

inline LoopLoss loop_loss(const GridTensor<double>& pred, const TargetTensor& t, const GridSpec& g,
                   const MeanSize& means, const CodecConfig& codec,
                   const std::vector<double>* fixed_c = nullptr) {
  LoopLoss out;
  std::size_t which = 0;
  for (int cy = 0; cy < g.cells_y; ++cy)
    for (int cx = 0; cx < g.cells_x; ++cx)
      for (int a = 0; a < g.anchors; ++a) {
        const double s = sig(pred.at(cy, cx, a, 21));
        const ResponsibleSlot* rs = nullptr;
        for (const auto& r : t.slots)
          if (r.cell_y == cy && r.cell_x == cx && r.anchor == a) rs = &r;
        if (!rs) {
          out.conf_no += s * s;
          continue;
        }
        double px[9], py[9], tx[9], ty[9];
        for (int k = 0; k < 9; ++k) {
          double x = pred.at(cy, cx, a, 2 * k), y = pred.at(cy, cx, a, 2 * k + 1);
          if (k == 0) x = sig(x), y = sig(y);
          px[k] = x + cx;
          py[k] = y + cy;
          tx[k] = rs->pixels[k].x() / g.stride;
          ty[k] = rs->pixels[k].y() / g.stride;
          out.coord += (px[k] - tx[k]) * (px[k] - tx[k]) + (py[k] - ty[k]) * (py[k] - ty[k]);
        }
        const double ph = means.h * std::exp(pred.at(cy, cx, a, 18));
        const double pw = means.w * std::exp(pred.at(cy, cx, a, 19));
        const double pl = means.l * std::exp(pred.at(cy, cx, a, 20));
        out.dim += (ph - rs->size.h) * (ph - rs->size.h) + (pw - rs->size.w) * (pw - rs->size.w) +
                   (pl - rs->size.l) * (pl - rs->size.l);
        double c;
        if (fixed_c) {
          std::size_t pos = 0;
          while (&t.slots[pos] != rs) ++pos;
          c = (*fixed_c)[pos];
        } else {
          double d = 0;
          for (int k = 0; k < 9; ++k) d += std::hypot(px[k] - tx[k], py[k] - ty[k]) * g.stride;
          d /= 9;
          c = d < codec.distance_threshold
                  ? (std::exp(codec.alpha * (1 - d / codec.distance_threshold)) - 1) /
                        (std::exp(codec.alpha) - 1)
                  : 0.0;
        }
        out.conf += (c - s) * (c - s);
        ++which;
      }
  return out;
}

inline std::vector<OrientedBox3D> random_scene(std::mt19937_64& rng, int count) {
  const CameraIntrinsics k = small_camera();
  std::vector<OrientedBox3D> boxes;
  for (int i = 0; i < count; ++i) boxes.push_back(random_visible_box(rng, k, 0.3, 0.6));
  return boxes;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}


// Brute force over all n^M member combinations with the loop oracle.
inline double exhaustive_min(const GridTensor<double>& pred,
                      const std::vector<std::vector<InstanceKeypoints>>& orbits) {
  const int M = static_cast<int>(orbits.size());
  std::vector<int> pick(M, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<InstanceKeypoints> chosen;
    for (int m = 0; m < M; ++m) chosen.push_back(orbits[m][pick[m]]);
    const TargetTensor t = build_targets(std::span<const InstanceKeypoints>(chosen), kGrid, kAnchors, kMeans);
    best = std::min(best, loop_loss(pred, t, kGrid, kMeans, kCodec).total(kW));
    int m = M - 1;
    for (; m >= 0; --m) {
      if (++pick[m] < static_cast<int>(orbits[m].size())) break;
      pick[m] = 0;
    }
    if (m < 0) break;
  }
  return best;
}


}  // namespace berrypose::testing::lossfix
