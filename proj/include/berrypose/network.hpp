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
/// \brief Image -> S_y x S_x x A x 22 prediction network.
///
/// Backbones:
///   - `tiny`: one 3x3 conv-BN-leaky block per entry of `channels`, 2x2 max
///     pooling after each of the first log2(stride) blocks.
///   - `darknet19`: the Darknet-19 layout (3x3 / 1x1 alternation, five pools)
///     with widths taken from the six entries of `channels`, plus one extra
///     3x3 block before the head.
/// The head is a single 1x1 convolution with bias emitting A * V channels
/// (V = 22 for the pose head). Outputs are raw logits; activations live in the
/// codec and the loss.

#pragma once

#include <bit>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "berrypose/codec.hpp"
#include "berrypose/error.hpp"
#include "berrypose/nn.hpp"

namespace berrypose {

struct ModelConfig {
  std::string backbone = "tiny";
  int input_width = 416;
  int input_height = 416;
  int anchors = 5;
  int stride = 32;
  std::vector<int> channels = {16, 32, 64, 128, 256, 256};
  int values_per_anchor = kValuesPerAnchor;
  double head_conf_bias = -4.6;  ///< initial confidence logit (sigmoid ~ 0.01)
  std::uint64_t seed = 0;

  static ModelConfig darknet19(int width = 416, int height = 416, int anchors = 5) {
    ModelConfig c;
    c.backbone = "darknet19";
    c.input_width = width;
    c.input_height = height;
    c.anchors = anchors;
    c.stride = 32;
    c.channels = {32, 64, 128, 256, 512, 1024};
    return c;
  }

  void validate() const {
    if (backbone != "tiny" && backbone != "darknet19")
      throw ConfigError("model: unknown backbone '" + backbone + "'");
    if (stride <= 1 || !std::has_single_bit(static_cast<unsigned>(stride)))
      throw ConfigError("model: stride must be a power of two");
    if (backbone == "darknet19" && stride != 32)
      throw ConfigError("model: darknet19 backbone has stride 32");
    if (backbone == "darknet19" && channels.size() != 6)
      throw ConfigError("model: darknet19 needs six channel widths");
    const int pools = std::countr_zero(static_cast<unsigned>(stride));
    if (backbone == "tiny" && static_cast<int>(channels.size()) < pools)
      throw ConfigError("model: tiny backbone needs at least log2(stride) blocks");
    for (int c : channels)
      if (c <= 0) throw ConfigError("model: channel widths must be positive");
    if (anchors < 1 || values_per_anchor < 1) throw ConfigError("model: empty head");
    if (input_width <= 0 || input_height <= 0 || input_width % stride != 0 ||
        input_height % stride != 0)
      throw ConfigError("model: input resolution " + std::to_string(input_width) + "x" +
                        std::to_string(input_height) + " is not divisible by stride " +
                        std::to_string(stride));
  }

  GridSpec grid() const { return GridSpec::make(input_width, input_height, stride, anchors); }
};

template <class T>
class Model {
 public:
  struct Block {
    nn::Conv2d<T> conv;
    nn::BatchNorm2d<T> bn;
    bool pool = false;
    nn::MaxPool2<T> mp;
  };

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    struct Spec {
      int cout, k;
      bool pool;
    };
    std::vector<Spec> specs;
    const auto& w = cfg_.channels;
    if (cfg_.backbone == "tiny") {
      const int pools = std::countr_zero(static_cast<unsigned>(cfg_.stride));
      for (std::size_t i = 0; i < w.size(); ++i)
        specs.push_back({w[i], 3, static_cast<int>(i) < pools});
    } else {
      specs = {{w[0], 3, true},  {w[1], 3, true},  {w[2], 3, false}, {w[1], 1, false},
               {w[2], 3, true},  {w[3], 3, false}, {w[2], 1, false}, {w[3], 3, true},
               {w[4], 3, false}, {w[3], 1, false}, {w[4], 3, false}, {w[3], 1, false},
               {w[4], 3, true},  {w[5], 3, false}, {w[4], 1, false}, {w[5], 3, false},
               {w[4], 1, false}, {w[5], 3, false}, {w[5], 3, false}};
    }
    int cin = 3;
    blocks_.resize(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const std::string name = "backbone." + std::to_string(i);
      blocks_[i].conv = nn::Conv2d<T>(name + ".conv", cin, specs[i].cout, specs[i].k, false);
      blocks_[i].bn = nn::BatchNorm2d<T>(name + ".bn", specs[i].cout);
      blocks_[i].pool = specs[i].pool;
      cin = specs[i].cout;
    }
    head_ = nn::Conv2d<T>("head", cin, cfg_.anchors * cfg_.values_per_anchor, 1, true);

    std::mt19937_64 rng(cfg_.seed);
    for (Block& b : blocks_) b.conv.init(rng);
    std::normal_distribution<double> small(0.0, 0.01);
    for (T& v : head_.weight().value) v = static_cast<T>(small(rng));
    if (cfg_.values_per_anchor == kValuesPerAnchor) {
      for (int a = 0; a < cfg_.anchors; ++a)
        head_.bias().value[a * kValuesPerAnchor + kConfidence] = static_cast<T>(cfg_.head_conf_bias);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  GridSpec grid() const { return cfg_.grid(); }
  int cells_x() const { return cfg_.input_width / cfg_.stride; }
  int cells_y() const { return cfg_.input_height / cfg_.stride; }

  /// x: N x 3 x H x W in [0, 1]. Returns N x (A*V) x S_y x S_x raw logits.
  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train) {
    if (x.c != 3 || x.h != cfg_.input_height || x.w != cfg_.input_width)
      throw ShapeError("model: expected N x 3 x " + std::to_string(cfg_.input_height) + " x " +
                       std::to_string(cfg_.input_width) + " input, got N x " +
                       std::to_string(x.c) + " x " + std::to_string(x.h) + " x " +
                       std::to_string(x.w));
    const bool backbone_batch_stats = train && !backbone_frozen_;
    const bool cache = train && !backbone_frozen_;
    nn::Tensor<T> h = x;
    for (Block& b : blocks_) {
      h = b.conv.forward(std::move(h), cache);
      b.bn.forward(h, backbone_batch_stats, true);
      if (b.pool) h = b.mp.forward(h);
    }
    return head_.forward(std::move(h), train);
  }

  /// Backpropagates dL/d(output) of the last forward call. Stops at the head
  /// input while the backbone is frozen.
  void backward(const nn::Tensor<T>& dout) {
    nn::Tensor<T> g = head_.backward(dout, !backbone_frozen_);
    if (backbone_frozen_) return;
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      Block& b = blocks_[i];
      if (b.pool) g = b.mp.backward(g);
      b.bn.backward(g, true);
      g = b.conv.backward(g, i > 0);
    }
  }

  /// Drops cached activations (e.g. after inference).
  void release() {
    for (Block& b : blocks_) {
      b.conv.release();
      b.bn.release();
      b.mp.release();
    }
    head_.release();
  }

  void set_backbone_frozen(bool frozen) {
    backbone_frozen_ = frozen;
    for (nn::Param<T>* p : backbone_params()) p->frozen = frozen;
    for (Block& b : blocks_) b.bn.set_update_running(!frozen);
  }
  bool backbone_frozen() const { return backbone_frozen_; }

  std::vector<nn::Param<T>*> backbone_params() {
    std::vector<nn::Param<T>*> out;
    for (Block& b : blocks_) {
      out.push_back(&b.conv.weight());
      out.push_back(&b.bn.gamma());
      out.push_back(&b.bn.beta());
    }
    return out;
  }
  std::vector<nn::Param<T>*> head_params() { return {&head_.weight(), &head_.bias()}; }
  std::vector<nn::Param<T>*> params() {
    auto out = backbone_params();
    for (auto* p : head_params()) out.push_back(p);
    return out;
  }
  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  /// Every persistent tensor (parameters and BN running statistics) by name.
  std::vector<std::pair<std::string, std::vector<T>*>> state() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (Block& b : blocks_) {
      out.emplace_back(b.conv.weight().name, &b.conv.weight().value);
      out.emplace_back(b.bn.gamma().name, &b.bn.gamma().value);
      out.emplace_back(b.bn.beta().name, &b.bn.beta().value);
      out.emplace_back(b.bn.name() + ".running_mean", &b.bn.running_mean());
      out.emplace_back(b.bn.name() + ".running_var", &b.bn.running_var());
    }
    out.emplace_back(head_.weight().name, &head_.weight().value);
    out.emplace_back(head_.bias().name, &head_.bias().value);
    return out;
  }
  std::vector<std::pair<std::string, std::vector<T>*>> backbone_state() {
    auto all = state();
    std::erase_if(all, [](const auto& kv) { return kv.first.rfind("backbone.", 0) != 0; });
    return all;
  }

  /// Copies matching tensors from `src`; returns names that were missing from
  /// `src` or had a different length.
  std::vector<std::string> load_state(const std::map<std::string, std::vector<T>>& src,
                                      bool backbone_only = false) {
    std::vector<std::string> missing;
    for (auto& [name, dst] : backbone_only ? backbone_state() : state()) {
      const auto it = src.find(name);
      if (it == src.end() || it->second.size() != dst->size()) {
        missing.push_back(name);
        continue;
      }
      *dst = it->second;
    }
    return missing;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

 private:
  ModelConfig cfg_;
  std::vector<Block> blocks_;
  nn::Conv2d<T> head_;
  bool backbone_frozen_ = false;
};

template <class T>
std::unique_ptr<Model<T>> build_model(const ModelConfig& cfg) {
  return std::make_unique<Model<T>>(cfg);
}

/// Network output for image `i` rearranged as S_y x S_x x A x 22.
template <class T>
GridTensor<T> to_grid(const nn::Tensor<T>& out, int i, const GridSpec& g) {
  if (out.c != g.anchors * kValuesPerAnchor || out.h != g.cells_y || out.w != g.cells_x)
    throw ShapeError("to_grid: network output does not match the grid");
  GridTensor<T> t(g);
  const T* src = out.image(i);
  const std::size_t plane = out.plane();
  for (int a = 0; a < g.anchors; ++a)
    for (int k = 0; k < kValuesPerAnchor; ++k) {
      const T* ch = src + (a * kValuesPerAnchor + k) * plane;
      for (int y = 0; y < g.cells_y; ++y)
        for (int x = 0; x < g.cells_x; ++x) t.at(y, x, a, k) = ch[y * g.cells_x + x];
    }
  return t;
}

/// Inverse of `to_grid`, writing into image `i` of `out`.
template <class T>
void from_grid(const GridTensor<T>& t, nn::Tensor<T>& out, int i) {
  T* dst = out.image(i);
  const std::size_t plane = out.plane();
  for (int a = 0; a < t.anchors(); ++a)
    for (int k = 0; k < kValuesPerAnchor; ++k) {
      T* ch = dst + (a * kValuesPerAnchor + k) * plane;
      for (int y = 0; y < t.cells_y(); ++y)
        for (int x = 0; x < t.cells_x(); ++x) ch[y * t.cells_x() + x] = t.at(y, x, a, k);
    }
}

}  // namespace berrypose
