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
/// \brief Image -> detections with poses: forward, decode, NMS, PnP.

#pragma once

#include <chrono>
#include <memory>
#include <vector>

#include "berrypose/augment.hpp"
#include "berrypose/checkpoint.hpp"
#include "berrypose/codec.hpp"
#include "berrypose/network.hpp"
#include "berrypose/pnp.hpp"

namespace berrypose {

struct PredictTiming {
  double forward_ms = 0.0;
  double post_ms = 0.0;  ///< decode + NMS + PnP
  double total_ms() const { return forward_ms + post_ms; }
};

class Predictor {
 public:
  explicit Predictor(const Checkpoint& c)
      : model_(model_from_checkpoint(c)), anchors_(c.anchors), means_(c.means), codec_(c.codec) {
    if (c.kind != "pose") throw ConfigError("predictor: checkpoint kind '" + c.kind + "' is not a pose model");
  }

  const ModelConfig& config() const { return model_->config(); }
  CodecConfig& codec() { return codec_; }
  const MeanSize& means() const { return means_; }

  /// Detections in the pixel frame of `img`, posed with `k`.
  std::vector<Detection> predict(const RgbImage& img, const CameraIntrinsics& k,
                                 PredictTiming* timing = nullptr) {
    const int w = model_->config().input_width, h = model_->config().input_height;
    nn::Tensor<float> x(1, 3, h, w);
    const std::vector<float> in = to_input(img, w, h);
    x.data.assign(in.begin(), in.end());
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const nn::Tensor<float> out = model_->forward(x, false);
    model_->release();
    const auto t1 = clock::now();
    std::vector<Detection> dets = postprocess(to_grid(out, 0, model_->grid()), img.width, img.height, k);
    const auto t2 = clock::now();
    if (timing) {
      timing->forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      timing->post_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    }
    return dets;
  }

  /// Decode + NMS + PnP on one raw grid, mapping keypoints back to an image
  /// of (width, height).
  std::vector<Detection> postprocess(const GridTensor<float>& raw, int width, int height,
                                     const CameraIntrinsics& k) const {
    const ModelConfig& mc = model_->config();
    std::vector<Detection> dets = nms(decode(raw, mc.grid(), means_, codec_.conf_threshold), codec_.nms_iou);
    const AxisAffine back = resize_map(mc.input_width, mc.input_height, width, height);
    for (Detection& d : dets) {
      for (Vec2& p : d.keypoints) p = back.apply(p);
      try {
        d.pose = solve_pnp(d.keypoints, d.size, k);
      } catch (const PnPError&) {
        d.pose_failed = true;
      }
    }
    return dets;
  }

  Model<float>& model() { return *model_; }

 private:
  std::unique_ptr<Model<float>> model_;
  AnchorSet anchors_;
  MeanSize means_;
  CodecConfig codec_;
};

}  // namespace berrypose
