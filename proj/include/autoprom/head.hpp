#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "autoprom/decoder.hpp"
#include "autoprom/layers.hpp"

namespace autoprom {

struct HeadConfig {
  std::size_t channels = 64;
  std::size_t num_classes = 2;
  std::size_t anchors_per_cell = 9;
  std::size_t depth = 4;
  double prior = 0.01;
};

/// Flattened head outputs for a batch: class logits [N, A, K] and box
/// deltas [N, A, 4], anchors ordered as in AnchorSet.
template <typename T>
struct HeadOutput {
  Tensor<T> class_logits;
  Tensor<T> box_deltas;
};

/// Conv+ReLU stack followed by a prediction conv; shared across levels.
template <typename T>
class Subnet {
 public:
  Subnet() = default;
  Subnet(const std::string& name, std::size_t channels, std::size_t depth, std::size_t out_channels,
         std::mt19937_64& rng) {
    for (std::size_t i = 0; i < depth; ++i)
      convs_.emplace_back(name + ".conv" + std::to_string(i), LayerSpec::conv2d(channels, channels, 3, 1, 1),
                          true, rng);
    relus_.resize(depth);
    out_ = Conv2d<T>(name + ".out", LayerSpec::conv2d(channels, out_channels, 3, 1, 1), true, rng);
  }

  Conv2d<T>& output_conv() { return out_; }

  Tensor<T> forward(Tensor<T> x, ForwardMode mode) {
    for (std::size_t i = 0; i < convs_.size(); ++i) x = relus_[i].forward(convs_[i].forward(x, mode), mode);
    return out_.forward(x, mode);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = out_.backward(dy);
    for (std::size_t i = convs_.size(); i-- > 0;) g = convs_[i].backward(relus_[i].backward(g));
    return g;
  }

  void clear_saved() {
    for (auto& c : convs_) c.clear_saved();
    for (auto& r : relus_) r.clear_saved();
    out_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    for (auto& c : convs_) c.visit(v);
    out_.visit(v);
  }

 private:
  std::vector<Conv2d<T>> convs_;
  std::vector<ReLU<T>> relus_;
  Conv2d<T> out_;
};

/// Classification and regression subnets applied to every pyramid level.
template <typename T>
class DetectionHead {
 public:
  DetectionHead(HeadConfig config, std::mt19937_64& rng) : config_(config) {
    if (config_.num_classes == 0) throw ValidationError("detection head: need at least one class");
    const std::size_t a = config_.anchors_per_cell;
    cls_ = Subnet<T>("head.cls", config_.channels, config_.depth, a * config_.num_classes, rng);
    reg_ = Subnet<T>("head.reg", config_.channels, config_.depth, a * 4, rng);
    cls_.output_conv().reinit_normal(0.01, prior_bias(config_.prior), rng);
    reg_.output_conv().reinit_normal(0.01, 0.0, rng);
  }

  /// Logit whose sigmoid equals the prior: -log((1 - pi) / pi).
  static double prior_bias(double pi) { return -std::log((1.0 - pi) / pi); }

  const HeadConfig& config() const { return config_; }

  HeadOutput<T> forward(const FeaturePyramid<T>& pyramid, ForwardMode mode) {
    const std::size_t n = pyramid.levels[0].dim(0), k = config_.num_classes, a = config_.anchors_per_cell;
    std::size_t total = 0;
    for (const auto& z : pyramid.levels) {
      require_rank(z, 4, "detection head input");
      if (z.dim(1) != config_.channels)
        throw ShapeError("detection head: level has " + std::to_string(z.dim(1)) + " channels, expected " +
                         std::to_string(config_.channels));
      total += z.dim(2) * z.dim(3) * a;
    }
    HeadOutput<T> out{Tensor<T>({n, total, k}), Tensor<T>({n, total, 4})};
    std::size_t offset = 0;
    for (const auto& z : pyramid.levels) {
      scatter(cls_.forward(z, mode), out.class_logits, offset, k);
      scatter(reg_.forward(z, mode), out.box_deltas, offset, 4);
      offset += z.dim(2) * z.dim(3) * a;
    }
    return out;
  }

  /// Returns dL/dz per level. Levels are unwound in reverse forward order.
  std::array<Tensor<T>, kPyramidLevels> backward(const HeadOutput<T>& grad,
                                                 const std::array<Shape, kPyramidLevels>& level_shapes) {
    const std::size_t k = config_.num_classes, a = config_.anchors_per_cell;
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& s : level_shapes) {
      offsets.push_back(offset);
      offset += s[2] * s[3] * a;
    }
    std::array<Tensor<T>, kPyramidLevels> dz;
    for (std::size_t j = kPyramidLevels; j-- > 0;) {
      const Shape& s = level_shapes[j];
      Tensor<T> d_reg = reg_.backward(gather(grad.box_deltas, offsets[j], s, 4));
      Tensor<T> d_cls = cls_.backward(gather(grad.class_logits, offsets[j], s, k));
      add_inplace(d_cls, d_reg);
      dz[j] = std::move(d_cls);
    }
    return dz;
  }

  void clear_saved() {
    cls_.clear_saved();
    reg_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    cls_.visit(v);
    reg_.visit(v);
  }

 private:
  // conv output [N, A*W, H, W] with channel a*W + w  ->  flat[n, offset + (y*W + x)*A + a, w]
  void scatter(const Tensor<T>& conv_out, Tensor<T>& flat, std::size_t offset, std::size_t width) const {
    const std::size_t n = conv_out.dim(0), h = conv_out.dim(2), w = conv_out.dim(3);
    const std::size_t a = config_.anchors_per_cell, total = flat.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < a * width; ++ch) {
        const std::size_t anchor = ch / width, comp = ch % width;
        const T* src = conv_out.data() + (b * a * width + ch) * h * w;
        for (std::size_t p = 0; p < h * w; ++p)
          flat[(b * total + offset + p * a + anchor) * width + comp] = src[p];
      }
  }

  Tensor<T> gather(const Tensor<T>& flat, std::size_t offset, const Shape& level, std::size_t width) const {
    const std::size_t n = level[0], h = level[2], w = level[3];
    const std::size_t a = config_.anchors_per_cell, total = flat.dim(1);
    Tensor<T> out({n, a * width, h, w});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < a * width; ++ch) {
        const std::size_t anchor = ch / width, comp = ch % width;
        T* dst = out.data() + (b * a * width + ch) * h * w;
        for (std::size_t p = 0; p < h * w; ++p)
          dst[p] = flat[(b * total + offset + p * a + anchor) * width + comp];
      }
    return out;
  }

  HeadConfig config_;
  Subnet<T> cls_;
  Subnet<T> reg_;
};

}  // namespace autoprom
