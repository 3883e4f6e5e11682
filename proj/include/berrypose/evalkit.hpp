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
/// \brief Symmetry-aware matching and average precision over a dataset.
///
/// Matching is greedy in descending confidence; a detection may only claim a
/// ground truth that satisfies the criterion, so every matched pair is a true
/// positive. AP is the all-points interpolated area under the PR curve.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/dataset.hpp"
#include "berrypose/format.hpp"
#include "berrypose/geometry.hpp"
#include "berrypose/inference.hpp"

namespace berrypose {

struct Criterion {
  enum class Kind { kIoU, kPose };
  Kind kind = Kind::kIoU;
  double iou = 0.5;            ///< IoU must exceed this
  double translation = 0.02;   ///< meters, error must be below
  double rotation_deg = 20.0;  ///< degrees, error must be below

  static Criterion iou_above(double t) { return {Kind::kIoU, t, 0.0, 0.0}; }
  static Criterion pose_below(double meters, double deg) { return {Kind::kPose, 0.0, meters, deg}; }

  bool passes(double iou_v, double t_err, double r_err) const {
    if (kind == Kind::kIoU) return iou_v > iou;
    return t_err < translation && r_err < rotation_deg;
  }
  /// Larger is better among passing ground truths.
  double score(double iou_v, double t_err, double r_err) const {
    if (kind == Kind::kIoU) return iou_v;
    return -(t_err / translation + r_err / rotation_deg);
  }
  std::string name() const {
    char buf[48];
    if (kind == Kind::kIoU) std::snprintf(buf, sizeof buf, "IoU>%.1f", iou);
    else std::snprintf(buf, sizeof buf, "%gcm,%gdeg", translation * 100.0, rotation_deg);
    return buf;
  }
};

inline const std::array<Criterion, 4> kIoUCriteria = {Criterion::iou_above(0.5), Criterion::iou_above(0.6),
                                                      Criterion::iou_above(0.7), Criterion::iou_above(0.8)};
inline const std::array<Criterion, 4> kPoseCriteria = {
    Criterion::pose_below(0.02, 20.0), Criterion::pose_below(0.02, 10.0),
    Criterion::pose_below(0.01, 20.0), Criterion::pose_below(0.01, 10.0)};

/// Symmetric IoU and pose errors for every (detection, ground truth) pair of
/// one image. Detections without a pose get IoU 0 and infinite errors.
struct PairTable {
  int detections = 0, truths = 0;
  std::vector<double> iou, t_err, r_err;  ///< row-major detections x truths

  std::size_t at(int d, int g) const { return static_cast<std::size_t>(d) * truths + g; }
};

inline PairTable pair_table(const std::vector<Detection>& dets, const std::vector<OrientedBox3D>& gts,
                            int n = 12) {
  PairTable t;
  t.detections = static_cast<int>(dets.size());
  t.truths = static_cast<int>(gts.size());
  const std::size_t cells = dets.size() * gts.size();
  t.iou.assign(cells, 0.0);
  t.t_err.assign(cells, std::numeric_limits<double>::infinity());
  t.r_err.assign(cells, std::numeric_limits<double>::infinity());
  for (int d = 0; d < t.detections; ++d) {
    const auto box = dets[d].box();
    if (!box) continue;
    for (int g = 0; g < t.truths; ++g) {
      const std::size_t i = t.at(d, g);
      const PoseError e = symmetric_pose_errors(box->pose, gts[g], n);
      t.t_err[i] = e.translation;
      t.r_err[i] = e.rotation_deg;
      // boxes whose bounding spheres miss each other cannot overlap
      if (e.translation < 0.5 * (box->size.diagonal() + gts[g].size.diagonal()))
        t.iou[i] = symmetric_iou(*box, gts[g], n);
    }
  }
  return t;
}

struct MatchPair {
  int detection = 0;
  int truth = 0;
  double iou = 0.0;
  double t_err = 0.0;
  double r_err = 0.0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_detections;
  std::vector<int> unmatched_truths;
  std::vector<double> confidence;   ///< per detection
  std::vector<std::uint8_t> tp;     ///< per detection
  int truths = 0;
};

inline MatchResult match(const std::vector<Detection>& dets, const PairTable& t, const Criterion& c) {
  MatchResult r;
  r.truths = t.truths;
  r.confidence.resize(dets.size());
  r.tp.assign(dets.size(), 0);
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<std::uint8_t> claimed(static_cast<std::size_t>(t.truths), 0);
  for (int d : order) {
    r.confidence[d] = dets[d].confidence;
    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int g = 0; g < t.truths; ++g) {
      if (claimed[g]) continue;
      const std::size_t i = t.at(d, g);
      if (!c.passes(t.iou[i], t.t_err[i], t.r_err[i])) continue;
      const double s = c.score(t.iou[i], t.t_err[i], t.r_err[i]);
      if (s > best_score) {
        best_score = s;
        best = g;
      }
    }
    if (best < 0) {
      r.unmatched_detections.push_back(d);
      continue;
    }
    claimed[best] = 1;
    r.tp[d] = 1;
    const std::size_t i = t.at(d, best);
    r.pairs.push_back({d, best, t.iou[i], t.t_err[i], t.r_err[i]});
  }
  for (int g = 0; g < t.truths; ++g)
    if (!claimed[g]) r.unmatched_truths.push_back(g);
  return r;
}

inline MatchResult match(const std::vector<Detection>& dets, const std::vector<OrientedBox3D>& gts,
                         const Criterion& c, int n = 12) {
  return match(dets, pair_table(dets, gts, n), c);
}

/// Percent in [0, 100]; nullopt when the dataset has no ground truth.
inline std::optional<double> average_precision(const std::vector<MatchResult>& images) {
  struct Entry {
    double conf;
    bool tp;
  };
  std::vector<Entry> all;
  long truths = 0;
  for (const MatchResult& m : images) {
    truths += m.truths;
    for (std::size_t d = 0; d < m.confidence.size(); ++d) all.push_back({m.confidence[d], m.tp[d] != 0});
  }
  if (truths == 0) return std::nullopt;
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.conf > b.conf; });
  std::vector<double> rec{0.0}, prec{0.0};
  long tp = 0, fp = 0;
  for (const Entry& e : all) {
    (e.tp ? tp : fp)++;
    rec.push_back(static_cast<double>(tp) / truths);
    prec.push_back(static_cast<double>(tp) / (tp + fp));
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 0; i + 1 < rec.size(); ++i) ap += (rec[i + 1] - rec[i]) * prec[i + 1];
  return 100.0 * ap;
}

struct EvalReport {
  std::array<std::optional<double>, 4> ap_iou{};
  std::array<std::optional<double>, 4> ap_pose{};
  double latency_ms = 0.0;  ///< forward + decode + NMS + PnP, mean per image
  double fps = 0.0;
  int images = 0;
  int detections = 0;
  int truths = 0;
  int pose_failures = 0;
};

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json to_json(const EvalReport& r) {
  Json iou = Json::object(), pose = Json::object();
  const char* iou_keys[4] = {"0.5", "0.6", "0.7", "0.8"};
  const char* pose_keys[4] = {"2cm_20deg", "2cm_10deg", "1cm_20deg", "1cm_10deg"};
  for (int i = 0; i < 4; ++i) {
    iou[iou_keys[i]] = optional_json(r.ap_iou[i]);
    pose[pose_keys[i]] = optional_json(r.ap_pose[i]);
  }
  return {{"ap_iou", iou},         {"ap_pose", pose},       {"latency_ms", r.latency_ms},
          {"fps", r.fps},          {"images", r.images},    {"detections", r.detections},
          {"ground_truths", r.truths}, {"pose_failures", r.pose_failures}};
}

inline std::string format_report(const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    char buf[16];
    if (v) std::snprintf(buf, sizeof buf, "%8.2f", *v);
    else std::snprintf(buf, sizeof buf, "%8s", "N/A");
    return std::string(buf);
  };
  std::ostringstream os;
  os << "3D IoU AP (%)\n"
     << "  IoU     0.5      0.6      0.7      0.8\n"
     << "      ";
  for (const auto& v : r.ap_iou) os << cell(v) << ' ';
  os << "\n\nPose AP (%)\n"
     << "        2cm,20   2cm,10   1cm,20   1cm,10\n"
     << "      ";
  for (const auto& v : r.ap_pose) os << cell(v) << ' ';
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "\n\nimages %d  detections %d  ground truths %d  pnp failures %d\n"
                "latency %.2f ms/image  (%.1f FPS)\n",
                r.images, r.detections, r.truths, r.pose_failures, r.latency_ms, r.fps);
  os << buf;
  return os.str();
}

/// AP numbers for per-image detections against per-image ground truth.
/// Tables are computed on `threads` workers; the reduction is sequential.
inline EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<std::vector<OrientedBox3D>>& gts, int threads = 1,
                                      int n = 12) {
  if (dets.size() != gts.size()) throw ShapeError("evaluate: detection and ground truth lists differ in length");
  std::vector<PairTable> tables(dets.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < dets.size(); i = next++) tables[i] = pair_table(dets[i], gts[i], n);
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  EvalReport r;
  r.images = static_cast<int>(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    r.detections += static_cast<int>(dets[i].size());
    r.truths += static_cast<int>(gts[i].size());
    for (const Detection& d : dets[i]) r.pose_failures += d.pose_failed;
  }
  auto ap = [&](const Criterion& c) {
    std::vector<MatchResult> m;
    for (std::size_t i = 0; i < dets.size(); ++i) m.push_back(match(dets[i], tables[i], c));
    return average_precision(m);
  };
  for (int i = 0; i < 4; ++i) {
    r.ap_iou[i] = ap(kIoUCriteria[i]);
    r.ap_pose[i] = ap(kPoseCriteria[i]);
  }
  return r;
}

struct EvalOptions {
  std::string split = "test";
  int warmup = 1;
  int threads = 1;
  int limit = 0;  ///< 0 = every sample of the split
};

/// Inference on `split` of `data` followed by AP computation. Latency is the
/// mean over images after `warmup` untimed runs.
inline EvalReport evaluate(Predictor& p, const Dataset& data, const EvalOptions& opt = {},
                           std::vector<std::vector<Detection>>* out = nullptr) {
  std::vector<std::size_t> ids = data.split(opt.split);
  if (opt.limit > 0 && static_cast<std::size_t>(opt.limit) < ids.size()) ids.resize(opt.limit);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<OrientedBox3D>> gts;
  double total_ms = 0.0;
  int timed = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const LoadedSample s = data.load(ids[j]);
    if (j == 0)
      for (int w = 0; w < opt.warmup; ++w) p.predict(s.rgb, s.ann.intrinsics);
    PredictTiming t;
    dets.push_back(p.predict(s.rgb, s.ann.intrinsics, &t));
    total_ms += t.total_ms();
    ++timed;
    gts.push_back(s.boxes());
  }
  EvalReport r = evaluate_detections(dets, gts, opt.threads);
  if (timed > 0) {
    r.latency_ms = total_ms / timed;
    r.fps = r.latency_ms > 0.0 ? 1000.0 / r.latency_ms : 0.0;
  }
  if (out) *out = std::move(dets);
  return r;
}

}  // namespace berrypose
