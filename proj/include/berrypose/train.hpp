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
/// \brief Training loops: 6DoF keypoint training and 2D detection pretraining.

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "berrypose/augment.hpp"
#include "berrypose/checkpoint.hpp"
#include "berrypose/codec.hpp"
#include "berrypose/dataset.hpp"
#include "berrypose/error.hpp"
#include "berrypose/loss.hpp"
#include "berrypose/network.hpp"

namespace berrypose {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 600;
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> decay_epochs = {120, 240};
  double decay_factor = 0.1;
  bool augment = true;
  AugmentConfig aug;
  LossWeights weights;
  std::string schedule = "single";  ///< "single" or "two-stage"
  int freeze_epoch = 120;           ///< two-stage: backbone frozen from this epoch on
  int checkpoint_every = 10;
  int workers = 1;
  std::uint64_t seed = 0;
  int orbit_n = 12;
  std::string split = "train";
  int limit = 0;  ///< use only the first `limit` samples of the split (0 = all)

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(decay_factor > 0.0)) throw ConfigError("train: decay_factor must be positive");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
        throw ConfigError("train: decay epochs must be strictly increasing");
      if (decay_epochs[i] < 1 || decay_epochs[i] >= epochs)
        throw ConfigError("train: decay epochs must lie in [1, epochs)");
    }
    if (schedule != "single" && schedule != "two-stage")
      throw ConfigError("train: schedule must be 'single' or 'two-stage'");
    if (schedule == "two-stage" && (freeze_epoch < 1 || freeze_epoch >= epochs))
      throw ConfigError("train: freeze_epoch must lie in [1, epochs)");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    if (workers < 1) throw ConfigError("train: workers must be >= 1");
    if (orbit_n < 1) throw ConfigError("train: orbit_n must be >= 1");
    if (limit < 0) throw ConfigError("train: limit must be >= 0");
    weights.validate();
    if (augment) aug.validate();
  }

  /// Learning rate during 0-based epoch `e`.
  double lr_at(int e) const {
    double r = lr;
    for (int d : decay_epochs)
      if (e >= d) r *= decay_factor;
    return r;
  }
};

inline Json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"decay_epochs", c.decay_epochs},
          {"decay_factor", c.decay_factor},
          {"augment", c.augment},
          {"aug", {{"flip", c.aug.flip}, {"scale", c.aug.scale}, {"crop", c.aug.crop}, {"color", c.aug.color},
                   {"scale_min", c.aug.scale_min}, {"scale_max", c.aug.scale_max}, {"hue", c.aug.hue},
                   {"saturation", c.aug.saturation}, {"brightness", c.aug.brightness}}},
          {"weights", {{"coord", c.weights.coord}, {"dim", c.weights.dim}, {"conf", c.weights.conf},
                       {"conf_no", c.weights.conf_no}}},
          {"schedule", c.schedule},
          {"freeze_epoch", c.freeze_epoch},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"orbit_n", c.orbit_n},
          {"split", c.split},
          {"limit", c.limit}};
}

/// Per-epoch record, one line of metrics.jsonl.
struct EpochLog {
  int epoch = 0;  ///< 1-based, completed epochs
  double lr = 0.0;
  bool frozen = false;
  LossBreakdown loss;  ///< mean per image
  int images = 0;
  double seconds = 0.0;
};

inline Json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"lr", e.lr},
          {"backbone_frozen", e.frozen},
          {"loss", {{"coord", e.loss.coord}, {"dim", e.loss.dim}, {"conf", e.loss.conf},
                    {"conf_no", e.loss.conf_no}, {"total", e.loss.total}}},
          {"images", e.images},
          {"seconds", e.seconds}};
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), 0x7a11u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Runs fn(i) for i in [0, n) on `workers` threads.
template <class Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string epoch_name(int e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%04d.bpk", e);
  return buf;
}

}  // namespace detail

/// Anchors fitted to the keypoint hulls of `ids`, in model input pixels.
inline AnchorSet fit_dataset_anchors(const Dataset& data, const std::vector<std::size_t>& ids,
                                     const ModelConfig& mc, std::uint64_t seed) {
  std::vector<Anchor> hulls;
  for (std::size_t i : ids) {
    const AnnotationFile& a = data.annotation(i);
    const double sx = static_cast<double>(mc.input_width) / a.width;
    const double sy = static_cast<double>(mc.input_height) / a.height;
    for (const Annotation& an : a.instances) {
      try {
        const Rect r = hull_rect(project_keypoints(an.box, a.intrinsics));
        hulls.push_back({std::max(1.0, r.width() * sx), std::max(1.0, r.height() * sy)});
      } catch (const BehindCameraError&) {
      }
    }
  }
  if (static_cast<int>(hulls.size()) < mc.anchors)
    return AnchorSet::geometric(mc.anchors, 0.5 * mc.stride, 4.0 * mc.stride);
  return fit_anchors(hulls, mc.anchors, seed);
}

inline MeanSize dataset_mean_size(const Dataset& data, const std::vector<std::size_t>& ids) {
  double h = 0, w = 0, l = 0;
  int n = 0;
  for (std::size_t i : ids)
    for (const Annotation& a : data.annotation(i).instances) {
      h += a.box.size.h;
      w += a.box.size.w;
      l += a.box.size.l;
      ++n;
    }
  if (n == 0) return data.manifest().mean_size;
  return {h / n, w / n, l / n};
}

/// Everything the loss needs besides predictions.
struct LossContext {
  GridSpec grid;
  AnchorSet anchors;
  MeanSize means;
  LossWeights weights;
  CodecConfig codec;
};

/// Fills `x` with the images of `batch`, runs the model, and returns the summed
/// loss. With `grad_scale` > 0 also writes dL/d(output) scaled by it to `dout`.
inline LossBreakdown batch_loss(Model<float>& m, const std::vector<TrainSample>& batch, const LossContext& ctx,
                                bool train, nn::Tensor<float>* dout = nullptr, double grad_scale = 0.0) {
  const int n = static_cast<int>(batch.size());
  const ModelConfig& mc = m.config();
  nn::Tensor<float> x(n, 3, mc.input_height, mc.input_width);
  for (int i = 0; i < n; ++i) std::copy(batch[i].image.begin(), batch[i].image.end(), x.image(i));
  const nn::Tensor<float> out = m.forward(x, train);
  if (dout) *dout = nn::Tensor<float>(out.n, out.c, out.h, out.w);
  LossBreakdown sum;
  for (int i = 0; i < n; ++i) {
    const GridTensor<float> pred = to_grid(out, i, ctx.grid);
    const SymmetricLossResult r =
        symmetric_loss(pred, std::span<const std::vector<InstanceKeypoints>>(batch[i].orbits), ctx.grid,
                       ctx.anchors, ctx.means, ctx.weights, ctx.codec);
    sum += r.loss;
    if (dout) {
      GridTensor<float> g(ctx.grid);
      total_loss(pred, r.targets, ctx.grid, ctx.means, ctx.weights, ctx.codec, &g, grad_scale);
      from_grid(g, *dout, i);
    }
  }
  return sum;
}

/// Mean per-image loss over `ids` without augmentation, eval-mode network.
inline LossBreakdown dataset_loss(Model<float>& m, const Dataset& data, const std::vector<std::size_t>& ids,
                                  const LossContext& ctx, int orbit_n = 12, int batch = 8) {
  LossBreakdown sum;
  const ModelConfig& mc = m.config();
  for (std::size_t s = 0; s < ids.size(); s += batch) {
    std::vector<TrainSample> b;
    for (std::size_t j = s; j < std::min(ids.size(), s + batch); ++j)
      b.push_back(prepare_sample(data.load(ids[j]), mc.input_width, mc.input_height, nullptr, nullptr, orbit_n));
    sum += batch_loss(m, b, ctx, false);
  }
  m.release();
  if (!ids.empty()) sum *= 1.0 / static_cast<double>(ids.size());
  return sum;
}

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::optional<Checkpoint> resume;    ///< continue a previous run (kind "pose")
  std::optional<Checkpoint> backbone;  ///< initial backbone weights (kind "backbone" or "detect2d")
};

struct BackboneLoadReport {
  std::vector<std::string> missing;
  std::vector<std::string> unexpected;
};

/// Copies backbone tensors of `c` into `m`.
inline BackboneLoadReport load_backbone(Model<float>& m, const Checkpoint& c) {
  BackboneLoadReport r;
  std::map<std::string, std::vector<float>> bb;
  for (const auto& [name, v] : c.tensors)
    if (name.rfind("backbone.", 0) == 0) bb[name] = v;
  r.missing = m.load_state(bb, true);
  std::set<std::string> known;
  for (const auto& [name, v] : m.backbone_state()) known.insert(name);
  for (const auto& [name, v] : bb)
    if (!known.count(name)) r.unexpected.push_back(name);
  return r;
}

/// Optimizes the symmetric loss on `cfg.split` of `data`, writing
/// metrics.jsonl and checkpoints under `out`. Returns the final checkpoint.
inline Checkpoint train(const TrainConfig& cfg, ModelConfig mc, const Dataset& data,
                        const std::filesystem::path& out, const CodecConfig& codec = {},
                        const TrainHooks& hooks = {}) {
  cfg.validate();
  mc.values_per_anchor = kValuesPerAnchor;
  mc.seed = cfg.seed;
  std::vector<std::size_t> ids = data.split(cfg.split);
  if (cfg.limit > 0 && static_cast<std::size_t>(cfg.limit) < ids.size()) ids.resize(cfg.limit);
  if (ids.empty()) throw ConfigError("train: split '" + cfg.split + "' is empty");

  Checkpoint ck;
  int start_epoch = 0;
  if (hooks.resume) {
    ck = *hooks.resume;
    if (ck.kind != "pose") throw ConfigError("train: can only resume from a pose checkpoint");
    mc = ck.model;
    start_epoch = ck.epoch;
  } else {
    ck.model = mc;
    ck.anchors = fit_dataset_anchors(data, ids, mc, cfg.seed);
    ck.means = dataset_mean_size(data, ids);
    ck.codec = codec;
  }
  ck.kind = "pose";
  ck.train = to_json(cfg);
  auto model = build_model<float>(mc);
  if (hooks.resume) {
    const auto missing = model->load_state(ck.tensors);
    if (!missing.empty()) throw ConfigError("train: resume checkpoint lacks '" + missing.front() + "'");
    restore_optimizer(*model, ck.tensors);
  } else if (hooks.backbone) {
    const BackboneLoadReport r = load_backbone(*model, *hooks.backbone);
    if (!r.missing.empty()) throw ConfigError("train: backbone weights lack '" + r.missing.front() + "'");
  }
  const LossContext ctx{mc.grid(), ck.anchors, ck.means, cfg.weights, ck.codec};
  const nn::Sgd<float> opt{cfg.momentum, cfg.weight_decay};

  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError(out.string(), "cannot create directory: " + ec.message());
  std::ofstream log(out / "metrics.jsonl", start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError((out / "metrics.jsonl").string(), "cannot open for writing");

  auto snapshot = [&](int epoch) {
    ck.epoch = epoch;
    ck.tensors = capture_state(*model, true);
    ck.extra = {{"rng", {{"seed", cfg.seed}, {"epoch", epoch}}}};
    return ck;
  };
  const std::filesystem::path last = out / "last.bpk";

  for (int e = start_epoch; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool frozen = cfg.schedule == "two-stage" && e >= cfg.freeze_epoch;
    if (frozen != model->backbone_frozen()) model->set_backbone_frozen(frozen);
    const double lr = cfg.lr_at(e);

    std::vector<std::size_t> order = ids;
    std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(e), 0xffffu));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown epoch_sum;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const int n = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - s));
      std::vector<TrainSample> batch(n);
      detail::parallel_for(n, cfg.workers, [&](int i) {
        const std::size_t id = order[s + i];
        std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(e), id));
        batch[i] = prepare_sample(data.load(id), mc.input_width, mc.input_height, cfg.augment ? &cfg.aug : nullptr,
                                  &rng, cfg.orbit_n);
      });
      nn::Tensor<float> dout;
      const LossBreakdown l = batch_loss(*model, batch, ctx, true, &dout, 1.0 / n);
      if (!std::isfinite(l.total)) {
        model->release();
        throw NonFiniteLossError("train: non-finite loss at epoch " + std::to_string(e + 1) +
                                 (std::filesystem::exists(last) ? "; last good checkpoint " + last.string()
                                                                : std::string("; no checkpoint written yet")));
      }
      epoch_sum += l;
      model->zero_grad();
      model->backward(dout);
      opt.step(model->params(), lr);
    }
    model->release();

    EpochLog rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    rec.frozen = frozen;
    rec.images = static_cast<int>(order.size());
    rec.loss = epoch_sum;
    rec.loss *= 1.0 / static_cast<double>(order.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << to_json(rec).dump() << '\n';
    log.flush();
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const Checkpoint c = snapshot(e + 1);
    save_checkpoint(last, c);
    if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(out / detail::epoch_name(e + 1), c);
  }
  const Checkpoint final_ck = snapshot(cfg.epochs);
  save_checkpoint(out / "final.bpk", final_ck);
  return final_ck;
}

// ---------------------------------------------------------------------------
// 2D detection pretraining

inline constexpr int kValues2D = 5;  ///< x, y (sigmoid offsets), log w, log h, confidence

/// Summed 2D grid detection loss of raw head output `out` (image i) and its
/// gradient (scaled by `scale`) into `dout`.
inline LossBreakdown detection2d_loss(const nn::Tensor<float>& out, int i, const std::vector<Rect>& boxes,
                                      const GridSpec& g, const AnchorSet& anchors, const LossWeights& w,
                                      nn::Tensor<float>* dout, double scale) {
  const std::size_t plane = out.plane();
  const float* src = out.image(i);
  float* dst = dout ? dout->image(i) : nullptr;
  auto at = [&](int a, int k, int cy, int cx) { return (a * kValues2D + k) * plane + cy * g.cells_x + cx; };
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(g.slots()), 0);
  LossBreakdown lb;
  for (const Rect& r : boxes) {
    const Vec2 c(0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1));
    const auto cell = center_cell(c, g);
    if (!cell) continue;
    const auto [cy, cx] = *cell;
    int slot = -1, a = 0;
    for (int cand : anchor_preference({c, Vec2(r.x0, r.y0), Vec2(r.x1, r.y1), c, c, c, c, c, c}, anchors)) {
      const int idx = g.slot_index(cy, cx, cand);
      if (!taken[idx]) {
        slot = idx;
        a = cand;
        break;
      }
    }
    if (slot < 0) continue;
    taken[slot] = 1;
    const double t[4] = {c.x() / g.stride - cx, c.y() / g.stride - cy,
                         std::log(std::max(r.width(), 1e-3) / anchors[a].w),
                         std::log(std::max(r.height(), 1e-3) / anchors[a].h)};
    for (int k = 0; k < 4; ++k) {
      const std::size_t p = at(a, k, cy, cx);
      const double v = src[p];
      const double pv = k < 2 ? sigmoid(v) : v;
      const double diff = pv - t[k];
      lb.coord += diff * diff;
      if (dst) dst[p] += static_cast<float>(scale * w.coord * 2.0 * diff * (k < 2 ? pv * (1.0 - pv) : 1.0));
    }
    const std::size_t p = at(a, 4, cy, cx);
    const double s = sigmoid(static_cast<double>(src[p]));
    lb.conf += (1.0 - s) * (1.0 - s);
    if (dst) dst[p] += static_cast<float>(scale * w.conf * -2.0 * (1.0 - s) * s * (1.0 - s));
  }
  for (int cy = 0; cy < g.cells_y; ++cy)
    for (int cx = 0; cx < g.cells_x; ++cx)
      for (int a = 0; a < g.anchors; ++a) {
        if (taken[g.slot_index(cy, cx, a)]) continue;
        const std::size_t p = at(a, 4, cy, cx);
        const double s = sigmoid(static_cast<double>(src[p]));
        lb.conf_no += s * s;
        if (dst) dst[p] += static_cast<float>(scale * w.conf_no * 2.0 * s * s * (1.0 - s));
      }
  lb.total = w.coord * lb.coord + w.conf * lb.conf + w.conf_no * lb.conf_no;
  return lb;
}

/// Hull rectangles of the projected boxes of a prepared sample.
inline std::vector<Rect> hull_boxes(const TrainSample& s) {
  std::vector<Rect> out;
  for (const auto& orbit : s.orbits) out.push_back(hull_rect(orbit.front().pixels));
  return out;
}

struct Pretrain2DResult {
  Checkpoint detector;  ///< kind "detect2d"
  Checkpoint backbone;  ///< kind "backbone"
  LossBreakdown first_epoch, last_epoch;
};

/// Trains backbone + a temporary 2D head on keypoint-hull boxes and writes
/// detect2d.bpk and backbone.bpk under `out`.
inline Pretrain2DResult pretrain_2d(const TrainConfig& cfg, ModelConfig mc, const Dataset& data,
                                    const std::filesystem::path& out,
                                    const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  mc.values_per_anchor = kValues2D;
  mc.seed = cfg.seed;
  std::vector<std::size_t> ids = data.split(cfg.split);
  if (cfg.limit > 0 && static_cast<std::size_t>(cfg.limit) < ids.size()) ids.resize(cfg.limit);
  if (ids.empty()) throw ConfigError("pretrain2d: split '" + cfg.split + "' is empty");
  auto model = build_model<float>(mc);
  for (int a = 0; a < mc.anchors; ++a) model->head_params()[1]->value[a * kValues2D + 4] = static_cast<float>(mc.head_conf_bias);
  const AnchorSet anchors = fit_dataset_anchors(data, ids, mc, cfg.seed);
  const GridSpec g = mc.grid();
  const nn::Sgd<float> opt{cfg.momentum, cfg.weight_decay};
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError(out.string(), "cannot create directory: " + ec.message());
  std::ofstream log(out / "pretrain_metrics.jsonl");

  Pretrain2DResult res;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(e);
    std::vector<std::size_t> order = ids;
    std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(e), 0xfffeu));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown sum;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const int n = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - s));
      std::vector<TrainSample> batch(n);
      detail::parallel_for(n, cfg.workers, [&](int i) {
        std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(e), order[s + i]));
        batch[i] = prepare_sample(data.load(order[s + i]), mc.input_width, mc.input_height,
                                  cfg.augment ? &cfg.aug : nullptr, &rng, 1);
      });
      nn::Tensor<float> x(n, 3, mc.input_height, mc.input_width);
      for (int i = 0; i < n; ++i) std::copy(batch[i].image.begin(), batch[i].image.end(), x.image(i));
      const nn::Tensor<float> y = model->forward(x, true);
      nn::Tensor<float> dy(y.n, y.c, y.h, y.w);
      for (int i = 0; i < n; ++i) sum += detection2d_loss(y, i, hull_boxes(batch[i]), g, anchors, cfg.weights, &dy, 1.0 / n);
      if (!std::isfinite(sum.total)) throw NonFiniteLossError("pretrain2d: non-finite loss at epoch " + std::to_string(e + 1));
      model->zero_grad();
      model->backward(dy);
      opt.step(model->params(), lr);
    }
    model->release();
    EpochLog rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    rec.images = static_cast<int>(order.size());
    rec.loss = sum;
    rec.loss *= 1.0 / static_cast<double>(order.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << to_json(rec).dump() << '\n';
    if (e == 0) res.first_epoch = rec.loss;
    res.last_epoch = rec.loss;
    if (on_epoch) on_epoch(rec);
  }
  Checkpoint& det = res.detector;
  det.kind = "detect2d";
  det.model = mc;
  det.anchors = anchors;
  det.means = dataset_mean_size(data, ids);
  det.epoch = cfg.epochs;
  det.train = to_json(cfg);
  det.tensors = capture_state(*model, false);
  save_checkpoint(out / "detect2d.bpk", det);
  res.backbone = det;
  res.backbone.kind = "backbone";
  std::erase_if(res.backbone.tensors, [](const auto& kv) { return kv.first.rfind("backbone.", 0) != 0; });
  save_checkpoint(out / "backbone.bpk", res.backbone);
  return res;
}

/// Mean 2D loss of a detect2d checkpoint-style model over `ids`, no augmentation.
inline LossBreakdown detection2d_dataset_loss(Model<float>& m, const Dataset& data, const std::vector<std::size_t>& ids,
                                              const AnchorSet& anchors, const LossWeights& w) {
  const ModelConfig& mc = m.config();
  LossBreakdown sum;
  for (std::size_t id : ids) {
    const TrainSample s = prepare_sample(data.load(id), mc.input_width, mc.input_height, nullptr, nullptr, 1);
    nn::Tensor<float> x(1, 3, mc.input_height, mc.input_width);
    x.data.assign(s.image.begin(), s.image.end());
    const nn::Tensor<float> y = m.forward(x, false);
    sum += detection2d_loss(y, 0, hull_boxes(s), mc.grid(), anchors, w, nullptr, 0.0);
  }
  m.release();
  if (!ids.empty()) sum *= 1.0 / static_cast<double>(ids.size());
  return sum;
}

}  // namespace berrypose
