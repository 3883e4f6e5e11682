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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "berrypose/network.hpp"

using namespace berrypose;

namespace {

ModelConfig small_tiny(int w, int h) {
  ModelConfig c;
  c.input_width = w;
  c.input_height = h;
  c.channels = {4, 4, 8, 8, 8, 8};
  c.seed = 3;
  return c;
}

nn::Tensor<float> random_images(int n, int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  nn::Tensor<float> x(n, 3, h, w);
  for (float& v : x.data) v = u(rng);
  return x;
}

bool all_finite(const nn::Tensor<float>& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::vector<std::vector<float>> snapshot(const std::vector<nn::Param<float>*>& ps) {
  std::vector<std::vector<float>> out;
  for (auto* p : ps) out.push_back(p->value);
  return out;
}

// One MSE step against `target`; returns the loss.
double mse_step(Model<float>& m, const nn::Tensor<float>& x, const nn::Tensor<float>& target,
                double lr) {
  auto y = m.forward(x, true);
  nn::Tensor<float> g(y.n, y.c, y.h, y.w);
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y.data[i] - target.data[i];
    loss += d * d;
    g.data[i] = static_cast<float>(2.0 * d);
  }
  m.zero_grad();
  m.backward(g);
  nn::Sgd<float>{}.step(m.params(), lr);
  return loss;
}

}  // namespace

TEST_CASE("output shapes follow the grid") {
  SECTION("tiny 416 with five anchors") {
    ModelConfig c;
    Model<float> m(c);
    auto y = m.forward(nn::Tensor<float>(1, 3, 416, 416), false);
    CHECK(y.c == 5 * 22);
    CHECK(y.h == 13);
    CHECK(y.w == 13);
    const GridTensor<float> g = to_grid(y, 0, m.grid());
    CHECK(g.cells_x() == 13);
    CHECK(g.anchors() == 5);
  }
  SECTION("224 gives a 7x7 grid") {
    Model<float> m(small_tiny(224, 224));
    auto y = m.forward(nn::Tensor<float>(1, 3, 224, 224), false);
    CHECK(y.h == 7);
    CHECK(y.w == 7);
  }
  SECTION("darknet19 at 416") {
    ModelConfig c = ModelConfig::darknet19();
    c.channels = {4, 8, 8, 16, 16, 16};
    Model<float> m(c);
    auto y = m.forward(nn::Tensor<float>(1, 3, 416, 416), false);
    CHECK(y.c == 110);
    CHECK(y.h == 13);
    CHECK(y.w == 13);
  }
  SECTION("any divisible size") {
    for (auto [w, h] : {std::pair{64, 32}, {96, 160}, {32, 32}, {320, 64}}) {
      Model<float> m(small_tiny(w, h));
      auto y = m.forward(random_images(1, w, h, 1), false);
      CHECK(y.w == w / 32);
      CHECK(y.h == h / 32);
      CHECK(y.c == 110);
    }
  }
}

TEST_CASE("bad resolutions and shapes are rejected") {
  CHECK_THROWS_AS(Model<float>(small_tiny(420, 416)), ConfigError);
  CHECK_THROWS_AS(Model<float>(small_tiny(416, 100)), ConfigError);
  ModelConfig c = small_tiny(64, 64);
  c.stride = 24;
  CHECK_THROWS_AS(Model<float>(c), ConfigError);
  c = small_tiny(64, 64);
  c.backbone = "resnet";
  CHECK_THROWS_AS(Model<float>(c), ConfigError);
  Model<float> m(small_tiny(64, 64));
  CHECK_THROWS_AS(m.forward(nn::Tensor<float>(1, 3, 64, 96), false), ShapeError);
  CHECK_THROWS_AS(m.forward(nn::Tensor<float>(1, 1, 64, 64), false), ShapeError);
}

TEST_CASE("forward is finite, batched and deterministic in eval mode") {
  Model<float> m(small_tiny(128, 96));
  auto zero = m.forward(nn::Tensor<float>(1, 3, 96, 128), false);
  CHECK(all_finite(zero));
  CHECK(zero.n == 1);

  auto x = random_images(2, 128, 96, 7);
  auto a = m.forward(x, false);
  auto b = m.forward(x, false);
  CHECK(a.n == 2);
  CHECK(all_finite(a));
  CHECK(a.data == b.data);

  // Eval-mode outputs of an image do not depend on its batch mates.
  nn::Tensor<float> first(1, 3, 96, 128);
  std::copy(x.image(0), x.image(0) + x.image_size(), first.data.begin());
  auto solo = m.forward(first, false);
  for (std::size_t i = 0; i < solo.size(); ++i) CHECK(solo.data[i] == Catch::Approx(a.data[i]).margin(1e-5));
}

TEST_CASE("freezing keeps backbone weights bit-identical") {
  Model<float> m(small_tiny(64, 64));
  auto x = random_images(2, 64, 64, 11);
  nn::Tensor<float> target(2, 110, 2, 2);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0.f, 1.f);
  for (float& v : target.data) v = n(rng);

  m.set_backbone_frozen(true);
  REQUIRE(m.backbone_frozen());
  const auto bb = snapshot(m.backbone_params());
  const auto head = snapshot(m.head_params());
  std::vector<std::vector<float>> running;
  for (auto& [name, v] : m.backbone_state()) running.push_back(*v);
  mse_step(m, x, target, 1e-2);
  CHECK(snapshot(m.backbone_params()) == bb);
  CHECK(snapshot(m.head_params()) != head);
  std::vector<std::vector<float>> running_after;
  for (auto& [name, v] : m.backbone_state()) running_after.push_back(*v);
  CHECK(running_after == running);

  SECTION("unfrozen step matches the SGD update rule") {
    m.set_backbone_frozen(false);
    REQUIRE_FALSE(m.backbone_frozen());
    Model<float> probe = m;
    auto y = probe.forward(x, true);
    nn::Tensor<float> g(y.n, y.c, y.h, y.w);
    for (std::size_t i = 0; i < y.size(); ++i) g.data[i] = 2.f * (y.data[i] - target.data[i]);
    probe.zero_grad();
    probe.backward(g);

    const double lr = 1e-2;
    const auto before = snapshot(m.backbone_params());
    mse_step(m, x, target, lr);
    auto after = m.backbone_params();
    auto grads = probe.backbone_params();
    bool changed = false;
    for (std::size_t p = 0; p < after.size(); ++p) {
      const double wd = after[p]->decay ? 5e-4 : 0.0;
      for (std::size_t i = 0; i < after[p]->value.size(); ++i) {
        // fresh velocity: v = g + wd*w, w' = w - lr*v
        const double expect = before[p][i] - lr * (grads[p]->grad[i] + wd * before[p][i]);
        CHECK(after[p]->value[i] == Catch::Approx(expect).epsilon(1e-4).margin(1e-6));
        changed |= after[p]->value[i] != before[p][i];
      }
    }
    CHECK(changed);
  }

  SECTION("toggling twice is trainable again") {
    m.set_backbone_frozen(false);
    m.set_backbone_frozen(true);
    m.set_backbone_frozen(false);
    const auto before = snapshot(m.backbone_params());
    mse_step(m, x, target, 1e-2);
    CHECK(snapshot(m.backbone_params()) != before);
  }
}

TEST_CASE("every parameter group receives gradient") {
  for (ModelConfig c : {small_tiny(64, 64), [] {
                          ModelConfig d = ModelConfig::darknet19(64, 64);
                          d.channels = {4, 4, 8, 8, 8, 8};
                          return d;
                        }()}) {
    Model<float> m(c);
    auto x = random_images(2, 64, 64, 21);
    auto y = m.forward(x, true);
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n(0.f, 1.f);
    nn::Tensor<float> g(y.n, y.c, y.h, y.w);
    for (float& v : g.data) v = n(rng);
    m.zero_grad();
    m.backward(g);
    for (auto* p : m.params()) {
      bool nonzero = false;
      for (float v : p->grad) nonzero |= v != 0.f;
      INFO(p->name);
      CHECK(nonzero);
    }
  }
}

TEST_CASE("grid rearrangement round-trips") {
  const GridSpec grid = GridSpec::make(96, 64, 32, 5);
  nn::Tensor<float> out(2, 110, 2, 3);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(i);
  const auto t = to_grid(out, 1, grid);
  // channel a*22+k of image 1 at (y, x)
  CHECK(t.at(1, 2, 3, 4) == out.at(1, 3 * 22 + 4, 1, 2));
  nn::Tensor<float> back(2, 110, 2, 3);
  from_grid(t, back, 1);
  CHECK(std::equal(back.image(1), back.image(1) + back.image_size(), out.image(1)));
}

TEST_CASE("state round-trips by name") {
  Model<float> a(small_tiny(64, 64));
  ModelConfig other = small_tiny(64, 64);
  other.seed = 99;
  Model<float> b(other);
  std::map<std::string, std::vector<float>> saved;
  for (auto& [name, v] : a.state()) saved[name] = *v;
  CHECK(b.load_state(saved).empty());
  auto x = random_images(1, 64, 64, 4);
  CHECK(a.forward(x, false).data == b.forward(x, false).data);

  saved.erase("head.bias");
  Model<float> c(other);
  CHECK(c.load_state(saved) == std::vector<std::string>{"head.bias"});
  CHECK(c.load_state(saved, true).empty());
}
