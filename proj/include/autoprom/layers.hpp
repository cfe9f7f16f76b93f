#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "autoprom/error.hpp"
#include "autoprom/ops.hpp"
#include "autoprom/parameter.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

enum class LayerKind { kConv2d, kBatchNorm2d, kReLU, kUpsample2x, kDownsample2x, kAdd, kLinear1x1 };

/// Static description of one primitive; enough to infer the output shape
/// before anything runs.
struct LayerSpec {
  LayerKind kind = LayerKind::kReLU;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                          std::size_t padding = 0) {
    return {LayerKind::kConv2d, in, out, k, stride, padding};
  }
  static LayerSpec batchnorm2d(std::size_t c) { return {LayerKind::kBatchNorm2d, c, c}; }
  static LayerSpec relu() { return {LayerKind::kReLU}; }
  static LayerSpec upsample2x() { return {LayerKind::kUpsample2x}; }
  /// Learnable 2x reduction: 4x4 kernel, stride 2, padding 1.
  static LayerSpec downsample2x(std::size_t in, std::size_t out) {
    return {LayerKind::kDownsample2x, in, out, 4, 2, 1};
  }
  static LayerSpec add() { return {LayerKind::kAdd}; }
  static LayerSpec linear1x1(std::size_t in, std::size_t out) {
    return {LayerKind::kLinear1x1, in, out, 1, 1, 0};
  }

  bool is_conv() const {
    return kind == LayerKind::kConv2d || kind == LayerKind::kDownsample2x ||
           kind == LayerKind::kLinear1x1;
  }

  ConvGeometry geometry() const { return {kernel, stride, padding}; }

  Shape output_shape(const Shape& in) const {
    if (in.size() != 4) throw ShapeError("layer input must be NCHW, got " + shape_str(in));
    switch (kind) {
      case LayerKind::kConv2d:
      case LayerKind::kDownsample2x:
      case LayerKind::kLinear1x1:
        return conv2d_output_shape(in, {out_channels, in_channels, kernel, kernel}, geometry());
      case LayerKind::kBatchNorm2d:
        if (in[1] != in_channels)
          throw ShapeError("batchnorm2d: expected " + std::to_string(in_channels) +
                           " channels, got " + shape_str(in));
        return in;
      case LayerKind::kUpsample2x:
        return {in[0], in[1], in[2] * 2, in[3] * 2};
      case LayerKind::kReLU:
      case LayerKind::kAdd:
        return in;
    }
    return in;
  }
};

/// How a forward pass treats batch statistics and whether it saves
/// activations for a later backward().
struct ForwardMode {
  bool batch_stats = true;
  bool record = true;
};
inline constexpr ForwardMode kTraining{true, true};
inline constexpr ForwardMode kInference{false, false};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;

  /// He-uniform weights, zero bias.
  Conv2d(std::string name, const LayerSpec& spec, bool trainable, std::mt19937_64& rng)
      : spec_(spec) {
    if (!spec.is_conv()) throw ValidationError("Conv2d needs a convolution LayerSpec");
    if (spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel == 0)
      throw ValidationError("Conv2d " + name + ": channel counts and kernel must be positive");
    const std::size_t fan_in = spec.in_channels * spec.kernel * spec.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    weight_ = Parameter<T>(name + ".weight", std::move(w), trainable);
    bias_ = Parameter<T>(name + ".bias", Tensor<T>({spec.out_channels}), trainable);
  }

  /// Gaussian weights with a constant bias (used for prediction layers).
  void reinit_normal(double stddev, double bias_value, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : weight_.value.values()) v = static_cast<T>(dist(rng));
    bias_.value.fill(static_cast<T>(bias_value));
  }

  const LayerSpec& spec() const { return spec_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weight() const { return weight_; }
  const Parameter<T>& bias() const { return bias_; }

  Shape output_shape(const Shape& in) const { return spec_.output_shape(in); }

  Tensor<T> forward(const Tensor<T>& x, ForwardMode mode) {
    Tensor<T> y = conv2d(x, weight_.value, &bias_.value, spec_.geometry());
    if (mode.record) saved_.push_back(x);
    return y;
  }

  /// Pops the most recent saved input. Shared layers (applied to several
  /// inputs per pass) must be unwound in reverse order.
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    if (saved_.empty()) throw Error(weight_.name + ": backward without recorded forward");
    Tensor<T> x = std::move(saved_.back());
    saved_.pop_back();
    const bool train = weight_.trainable;
    return conv2d_backward(x, weight_.value, dy, spec_.geometry(), train ? &weight_.grad : nullptr,
                           train ? &bias_.grad : nullptr, need_input_grad);
  }

  void clear_saved() { saved_.clear(); }

  void visit(const StateVisitor<T>& v) {
    v.on_parameter(weight_);
    v.on_parameter(bias_);
  }

 private:
  LayerSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  std::vector<Tensor<T>> saved_;
};

/// Per-channel batch normalisation over (N, H, W), eps 1e-5, momentum 0.1.
template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels, bool trainable = true)
      : name_(std::move(name)),
        gamma_(name_ + ".gamma", Tensor<T>({channels}, T{1}), trainable),
        beta_(name_ + ".beta", Tensor<T>({channels}, T{0}), trainable),
        running_mean_({channels}, T{0}),
        running_var_({channels}, T{1}) {}

  std::size_t channels() const { return gamma_.value.numel(); }
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

  Tensor<T> forward(const Tensor<T>& x, ForwardMode mode) {
    require_rank(x, 4, "batchnorm2d");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (c != channels())
      throw ShapeError(name_ + ": expected " + std::to_string(channels()) + " channels, got " +
                       shape_str(x.shape()));
    const std::size_t count = n * plane;
    if (mode.batch_stats && count < 2)
      throw ValidationError(name_ + ": batch statistics need at least 2 values per channel, got " +
                            shape_str(x.shape()));

    Saved saved{Tensor<T>(x.shape()), std::vector<T>(c), mode.batch_stats};
    Tensor<T> y(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0.0, var = 0.0;
      if (mode.batch_stats) {
        for (std::size_t i = 0; i < n; ++i) {
          const T* p = x.data() + (i * c + ch) * plane;
          for (std::size_t k = 0; k < plane; ++k) mean += p[k];
        }
        mean /= static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i) {
          const T* p = x.data() + (i * c + ch) * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            const double d = p[k] - mean;
            var += d * d;
          }
        }
        const double unbiased = var / static_cast<double>(count - 1);
        var /= static_cast<double>(count);
        if (mode.record) {
          running_mean_[ch] =
              static_cast<T>((1.0 - kMomentum) * running_mean_[ch] + kMomentum * mean);
          running_var_[ch] =
              static_cast<T>((1.0 - kMomentum) * running_var_[ch] + kMomentum * unbiased);
        }
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const T inv_std = static_cast<T>(1.0 / std::sqrt(var + kEps));
      const T m = static_cast<T>(mean);
      const T g = gamma_.value[ch], b = beta_.value[ch];
      saved.inv_std[ch] = inv_std;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const T xhat = (x[off + k] - m) * inv_std;
          saved.xhat[off + k] = xhat;
          y[off + k] = g * xhat + b;
        }
      }
    }
    if (mode.record) saved_.push_back(std::move(saved));
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (saved_.empty()) throw Error(name_ + ": backward without recorded forward");
    Saved s = std::move(saved_.back());
    saved_.pop_back();
    if (dy.shape() != s.xhat.shape()) throw ShapeError(name_ + ": gradient shape mismatch");
    const std::size_t n = dy.dim(0), c = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
    const double count = static_cast<double>(n * plane);
    Tensor<T> dx(dy.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          sum_dy += dy[off + k];
          sum_dy_xhat += dy[off + k] * s.xhat[off + k];
        }
      }
      if (gamma_.trainable) {
        gamma_.grad[ch] += static_cast<T>(sum_dy_xhat);
        beta_.grad[ch] += static_cast<T>(sum_dy);
      }
      const T g = gamma_.value[ch];
      const T scale = g * s.inv_std[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          if (s.batch_stats) {
            dx[off + k] = static_cast<T>(
                scale / count * (count * dy[off + k] - sum_dy - s.xhat[off + k] * sum_dy_xhat));
          } else {
            dx[off + k] = scale * dy[off + k];
          }
        }
      }
    }
    return dx;
  }

  void clear_saved() { saved_.clear(); }

  void visit(const StateVisitor<T>& v) {
    v.on_parameter(gamma_);
    v.on_parameter(beta_);
    v.on_buffer({name_ + ".running_mean", &running_mean_});
    v.on_buffer({name_ + ".running_var", &running_var_});
  }

 private:
  struct Saved {
    Tensor<T> xhat;
    std::vector<T> inv_std;
    bool batch_stats;
  };

  std::string name_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
  std::vector<Saved> saved_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, ForwardMode mode) {
    Tensor<T> y = relu(x);
    if (mode.record) saved_.push_back(y);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (saved_.empty()) throw Error("relu: backward without recorded forward");
    Tensor<T> y = std::move(saved_.back());
    saved_.pop_back();
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
    return dx;
  }

  void clear_saved() { saved_.clear(); }

 private:
  std::vector<Tensor<T>> saved_;
};

/// Convolution followed by batch normalisation, optionally ReLU.
template <typename T>
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(const std::string& name, const LayerSpec& conv_spec, bool with_relu, std::mt19937_64& rng)
      : conv_(name + ".conv", conv_spec, true, rng),
        bn_(name + ".bn", conv_spec.out_channels),
        with_relu_(with_relu) {}

  Shape output_shape(const Shape& in) const { return conv_.output_shape(in); }

  Tensor<T> forward(const Tensor<T>& x, ForwardMode mode) {
    Tensor<T> y = bn_.forward(conv_.forward(x, mode), mode);
    return with_relu_ ? relu_.forward(y, mode) : y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    Tensor<T> g = with_relu_ ? relu_.backward(dy) : dy;
    return conv_.backward(bn_.backward(g), need_input_grad);
  }

  void clear_saved() {
    conv_.clear_saved();
    bn_.clear_saved();
    relu_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    conv_.visit(v);
    bn_.visit(v);
  }

  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  ReLU<T> relu_;
  bool with_relu_ = false;
};

}  // namespace autoprom
