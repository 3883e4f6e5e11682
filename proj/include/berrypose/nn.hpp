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
/// \brief Minimal CPU building blocks for convolutional networks: an NCHW
/// tensor, trainable parameters, conv / batch-norm / leaky-ReLU / max-pool
/// layers with explicit backward passes, and SGD with momentum.
///
/// Every layer keeps the activations it needs from the last `forward` call, so
/// a layer instance supports one forward/backward pair at a time.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "berrypose/error.hpp"

namespace berrypose::nn {

template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  // fixed alignment keeps vectorized reductions bitwise reproducible
  std::vector<T, Eigen::aligned_allocator<T>> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t image_size() const { return static_cast<std::size_t>(c) * h * w; }
  T* image(int i) { return data.data() + i * image_size(); }
  const T* image(int i) const { return data.data() + i * image_size(); }
  T& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  const T& at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

template <class T>
struct Param {
  std::string name;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;
  bool decay = true;  ///< weight decay applies (off for BN affine terms and biases)
  bool frozen = false;

  void resize(std::size_t n) {
    value.assign(n, T(0));
    grad.assign(n, T(0));
    velocity.assign(n, T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Same-padded, stride-1 convolution with square kernel.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int cin, int cout, int kernel, bool bias)
      : cin_(cin), cout_(cout), k_(kernel), pad_(kernel / 2), has_bias_(bias) {
    weight_.name = name + ".weight";
    weight_.resize(static_cast<std::size_t>(cout) * cin * kernel * kernel);
    if (bias) {
      bias_.name = name + ".bias";
      bias_.decay = false;
      bias_.resize(static_cast<std::size_t>(cout));
    }
  }

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int kernel() const { return k_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

  /// He-normal weights scaled by `gain`.
  void init(std::mt19937_64& rng, double gain = 1.0) {
    const double fan_in = static_cast<double>(cin_) * k_ * k_;
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    for (T& v : weight_.value) v = static_cast<T>(dist(rng));
  }

  /// With `keep_cache` the layer retains what `backward` needs (the input for
  /// 1x1 kernels, the unfolded patches otherwise).
  Tensor<T> forward(Tensor<T> x, bool keep_cache = true) {
    if (x.c != cin_) throw ShapeError("conv: input channel mismatch");
    Tensor<T> y(x.n, cout_, x.h, x.w);
    const int hw = x.h * x.w;
    const int rows = cin_ * k_ * k_;
    const std::size_t col_size = static_cast<std::size_t>(rows) * hw;
    ConstMatMap<T> wm(weight_.value.data(), cout_, rows);
    if (k_ != 1 && keep_cache) cols_.resize(col_size * x.n);
    for (int i = 0; i < x.n; ++i) {
      MatMap<T> ym(y.image(i), cout_, hw);
      if (k_ == 1) {
        ym.noalias() = wm * ConstMatMap<T>(x.image(i), cin_, hw);
      } else {
        T* col = keep_cache ? cols_.data() + col_size * i : scratch(col_size);
        im2col(x.image(i), col, x.h, x.w);
        ym.noalias() = wm * ConstMatMap<T>(col, rows, hw);
      }
      if (has_bias_) {
        for (int o = 0; o < cout_; ++o) ym.row(o).array() += bias_.value[o];
      }
    }
    in_n_ = x.n;
    in_h_ = x.h;
    in_w_ = x.w;
    if (k_ == 1 && keep_cache) input_ = std::move(x);
    return y;
  }

  /// Accumulates parameter gradients (unless frozen) and returns dL/dx when
  /// `need_input_grad`.
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) {
    const int hw = in_h_ * in_w_;
    const int rows = cin_ * k_ * k_;
    const std::size_t col_size = static_cast<std::size_t>(rows) * hw;
    ConstMatMap<T> wm(weight_.value.data(), cout_, rows);
    MatMap<T> dwm(weight_.grad.data(), cout_, rows);
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(in_n_, cin_, in_h_, in_w_);
    for (int i = 0; i < in_n_; ++i) {
      ConstMatMap<T> dym(dy.image(i), cout_, hw);
      if (!weight_.frozen) {
        const T* src = k_ == 1 ? input_.image(i) : cols_.data() + col_size * i;
        dwm.noalias() += dym * ConstMatMap<T>(src, rows, hw).transpose();
      }
      if (has_bias_ && !bias_.frozen) {
        for (int o = 0; o < cout_; ++o) bias_.grad[o] += dym.row(o).sum();
      }
      if (need_input_grad) {
        if (k_ == 1) {
          MatMap<T>(dx.image(i), cin_, hw).noalias() = wm.transpose() * dym;
        } else {
          T* col = scratch(col_size);
          MatMap<T>(col, rows, hw).noalias() = wm.transpose() * dym;
          col2im(col, dx.image(i), in_h_, in_w_);
        }
      }
    }
    return dx;
  }

  void release() {
    input_ = Tensor<T>();
    cols_ = std::vector<T>();
  }

 private:
  T* scratch(std::size_t n) {
    if (scratch_.size() < n) scratch_.resize(n);
    return scratch_.data();
  }

  void im2col(const T* src, T* dst, int h, int w) const {
    const int hw = h * w;
    for (int c = 0; c < cin_; ++c) {
      const T* plane = src + static_cast<std::size_t>(c) * hw;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int dx = kx - pad_;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int y = 0; y < h; ++y) {
            T* row = dst + static_cast<std::size_t>(y) * w;
            const int sy = y + ky - pad_;
            if (sy < 0 || sy >= h || x1 <= x0) {
              std::fill(row, row + w, T(0));
              continue;
            }
            std::fill(row, row + x0, T(0));
            std::memcpy(row + x0, plane + static_cast<std::size_t>(sy) * w + x0 + dx,
                        sizeof(T) * static_cast<std::size_t>(x1 - x0));
            std::fill(row + x1, row + w, T(0));
          }
          dst += hw;
        }
      }
    }
  }

  void col2im(const T* src, T* out, int h, int w) const {
    const int hw = h * w;
    for (int c = 0; c < cin_; ++c) {
      T* plane = out + static_cast<std::size_t>(c) * hw;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int dx = kx - pad_;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad_;
            if (sy < 0 || sy >= h) continue;
            const T* row = src + static_cast<std::size_t>(y) * w;
            T* dst = plane + static_cast<std::size_t>(sy) * w + dx;
            for (int x = x0; x < x1; ++x) dst[x] += row[x];
          }
          src += hw;
        }
      }
    }
  }

  int cin_ = 0, cout_ = 0, k_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Param<T> weight_;
  Param<T> bias_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0;
  Tensor<T> input_;
  std::vector<T> cols_;
  std::vector<T> scratch_;
};

/// Per-channel batch normalization with learned affine terms.
template <class T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5)
      : c_(channels), momentum_(momentum), eps_(eps) {
    gamma_.name = name + ".gamma";
    beta_.name = name + ".beta";
    gamma_.decay = beta_.decay = false;
    gamma_.resize(channels);
    beta_.resize(channels);
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
    running_mean_.assign(channels, T(0));
    running_var_.assign(channels, T(1));
    name_ = std::move(name);
  }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }
  const std::string& name() const { return name_; }

  /// In place. `batch_stats` selects batch statistics (training) over running
  /// ones; `leaky` fuses a leaky ReLU after the affine step.
  void forward(Tensor<T>& x, bool batch_stats, bool leaky = false) {
    if (x.c != c_) throw ShapeError("batchnorm: channel mismatch");
    batch_stats_ = batch_stats;
    leaky_ = leaky;
    if (xhat_.size() != x.size()) xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
    xhat_.n = x.n;
    xhat_.c = x.c;
    xhat_.h = x.h;
    xhat_.w = x.w;
    inv_std_.assign(c_, T(0));
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(x.n) * plane;
    for (int ch = 0; ch < c_; ++ch) {
      double mean, var;
      if (batch_stats) {
        double s = 0.0, s2 = 0.0;
        for (int i = 0; i < x.n; ++i) {
          Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> p(x.image(i) + ch * plane,
                                                                 static_cast<Eigen::Index>(plane));
          s += p.sum();
          s2 += p.square().sum();
        }
        mean = s / count;
        var = std::max(0.0, s2 / count - mean * mean);
        if (update_running_) {
          const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
          running_mean_[ch] = static_cast<T>((1.0 - momentum_) * running_mean_[ch] + momentum_ * mean);
          running_var_[ch] =
              static_cast<T>((1.0 - momentum_) * running_var_[ch] + momentum_ * unbiased);
        }
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      inv_std_[ch] = inv;
      const T g = gamma_.value[ch];
      const T b = beta_.value[ch];
      const T m = static_cast<T>(mean);
      const T slope = leaky ? T(0.1) : T(1);
      for (int i = 0; i < x.n; ++i) {
        T* q = x.image(i) + ch * plane;
        T* xh = xhat_.image(i) + ch * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          xh[j] = (q[j] - m) * inv;
          const T y = g * xh[j] + b;
          q[j] = y > T(0) ? y : slope * y;
        }
      }
    }
  }

  /// In place: `dy` (w.r.t. the output, after the fused activation if any)
  /// becomes the input gradient when `need_input_grad`.
  void backward(Tensor<T>& dy, bool need_input_grad) {
    const std::size_t plane = dy.plane();
    const double count = static_cast<double>(dy.n) * plane;
    for (int ch = 0; ch < c_; ++ch) {
      const T gm = gamma_.value[ch];
      const T bt = beta_.value[ch];
      if (leaky_) {
        for (int i = 0; i < dy.n; ++i) {
          T* g = dy.image(i) + ch * plane;
          const T* xh = xhat_.image(i) + ch * plane;
          for (std::size_t j = 0; j < plane; ++j)
            if (!(gm * xh[j] + bt > T(0))) g[j] *= T(0.1);
        }
      }
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < dy.n; ++i) {
        const auto n = static_cast<Eigen::Index>(plane);
        Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> g(dy.image(i) + ch * plane, n);
        Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xh(xhat_.image(i) + ch * plane, n);
        sum_dy += g.sum();
        sum_dy_xhat += (g * xh).sum();
      }
      if (!gamma_.frozen) gamma_.grad[ch] += static_cast<T>(sum_dy_xhat);
      if (!beta_.frozen) beta_.grad[ch] += static_cast<T>(sum_dy);
      if (!need_input_grad) continue;
      const T scale = gm * inv_std_[ch];
      const T mdy = static_cast<T>(sum_dy / count);
      const T mdyx = static_cast<T>(sum_dy_xhat / count);
      for (int i = 0; i < dy.n; ++i) {
        T* g = dy.image(i) + ch * plane;
        const T* xh = xhat_.image(i) + ch * plane;
        if (batch_stats_) {
          for (std::size_t j = 0; j < plane; ++j) g[j] = scale * (g[j] - mdy - xh[j] * mdyx);
        } else {
          for (std::size_t j = 0; j < plane; ++j) g[j] = scale * g[j];
        }
      }
    }
  }

  /// Running statistics stop updating while frozen.
  void set_update_running(bool on) { update_running_ = on; }
  void release() { xhat_ = Tensor<T>(); }

 private:
  int c_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  bool batch_stats_ = true;
  bool leaky_ = false;
  bool update_running_ = true;
  std::string name_;
  Param<T> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <class T>
inline constexpr T kLeakySlope = T(0.1);

template <class T>
void leaky_relu_inplace(Tensor<T>& x) {
  for (T& v : x.data) v = v > T(0) ? v : kLeakySlope<T> * v;
}

/// Gradient through a leaky ReLU given its output (same sign as its input).
template <class T>
void leaky_relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(y.data[i] > T(0))) dy.data[i] *= kLeakySlope<T>;
}

/// 2x2 max pooling with stride 2 (input sides must be even).
template <class T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    if (x.h % 2 || x.w % 2) throw ShapeError("maxpool: odd spatial size");
    in_n_ = x.n;
    in_c_ = x.c;
    in_h_ = x.h;
    in_w_ = x.w;
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    argmax_.resize(y.size());
    std::size_t o = 0;
    for (int i = 0; i < x.n; ++i) {
      for (int c = 0; c < x.c; ++c) {
        const T* p = x.image(i) + c * x.plane();
        const std::size_t base = (static_cast<std::size_t>(i) * x.c + c) * x.plane();
        for (int yy = 0; yy < y.h; ++yy) {
          for (int xx = 0; xx < y.w; ++xx, ++o) {
            const int r0 = 2 * yy * x.w + 2 * xx;
            int best = r0;
            for (int cand : {r0 + 1, r0 + x.w, r0 + x.w + 1})
              if (p[cand] > p[best]) best = cand;
            y.data[o] = p[best];
            argmax_[o] = static_cast<std::uint32_t>(base + best);
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_n_, in_c_, in_h_, in_w_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax_[o]] += dy.data[o];
    return dx;
  }

  void release() { argmax_.clear(); }

 private:
  int in_n_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

/// SGD with momentum and decoupled-from-loss L2 weight decay added to the
/// gradient (the classic formulation). Frozen parameters are skipped.
template <class T>
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void step(const std::vector<Param<T>*>& params, double lr) const {
    for (Param<T>* p : params) {
      if (p->frozen) continue;
      const T mu = static_cast<T>(momentum);
      const T wd = p->decay ? static_cast<T>(weight_decay) : T(0);
      const T rate = static_cast<T>(lr);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const T g = p->grad[i] + wd * p->value[i];
        p->velocity[i] = mu * p->velocity[i] + g;
        p->value[i] -= rate * p->velocity[i];
      }
    }
  }
};

}  // namespace berrypose::nn
