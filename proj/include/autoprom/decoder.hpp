#pragma once

// Trainable projection network: four projection layers turn the four encoder
// blocks into pyramid levels z1..z4 (2S, S, S/2, S/4), chained by skip
// connections; two strided blocks extend the pyramid to z5, z6 (S/8, S/16).

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/encoder.hpp"
#include "autoprom/layers.hpp"
#include "autoprom/ops.hpp"
#include "autoprom/parameter.hpp"

namespace autoprom {

/// How the three layer maps of a block are combined before projection.
enum class FuseMode { kConcat, kSum };
/// Skip wiring between projection layers.
enum class SkipMode { kChain, kDirect, kNone };

NLOHMANN_JSON_SERIALIZE_ENUM(FuseMode, {{FuseMode::kConcat, "concat"}, {FuseMode::kSum, "sum"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SkipMode,
                             {{SkipMode::kChain, "chain"}, {SkipMode::kDirect, "direct"}, {SkipMode::kNone, "none"}})

inline constexpr std::size_t kPyramidLevels = 6;

struct DecoderConfig {
  std::size_t channels = 64;
  std::size_t in_channels = 32;
  std::size_t base_size = 16;
  FuseMode fuse = FuseMode::kConcat;
  SkipMode skip = SkipMode::kChain;

  void validate() const {
    if (channels == 0 || in_channels == 0) throw ValidationError("decoder: channel counts must be positive");
    if (base_size == 0 || base_size % 16 != 0)
      throw ValidationError("decoder: base spatial size " + std::to_string(base_size) +
                            " must be a positive multiple of 16 for six pyramid levels");
  }

  /// Spatial extents of z1..z6.
  std::vector<std::size_t> level_sizes() const {
    return {2 * base_size, base_size, base_size / 2, base_size / 4, base_size / 8, base_size / 16};
  }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"channels", c.channels}, {"in_channels", c.in_channels}, {"base_size", c.base_size},
       {"fuse", c.fuse}, {"skip", c.skip}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_size = j.value("base_size", c.base_size);
  c.fuse = j.value("fuse", c.fuse);
  c.skip = j.value("skip", c.skip);
}

template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, kPyramidLevels> levels;
};

/// One of p1..p4: three conv+BN stages carrying the level's resampling, a
/// dense stage (1x1 conv, ReLU, BN), then the optional skip carry is added.
template <typename T>
class ProjectionLayer {
 public:
  ProjectionLayer() = default;

  /// which: 1..4. p1 upsamples x2, p2 keeps resolution, p3 halves, p4 quarters.
  ProjectionLayer(int which, const DecoderConfig& cfg, std::mt19937_64& rng) : which_(which), fuse_(cfg.fuse) {
    if (which < 1 || which > 4) throw ValidationError("projection layer index must be 1..4");
    const std::string name = "decoder.p" + std::to_string(which);
    const std::size_t in = cfg.fuse == FuseMode::kConcat ? 3 * cfg.in_channels : cfg.in_channels;
    const std::size_t c = cfg.channels;
    std::array<LayerSpec, 3> specs{LayerSpec::conv2d(in, c, 3, 1, 1), LayerSpec::conv2d(c, c, 3, 1, 1),
                                   LayerSpec::conv2d(c, c, 3, 1, 1)};
    if (which == 3) specs[1] = LayerSpec::downsample2x(c, c);
    if (which == 4) specs[1] = specs[2] = LayerSpec::downsample2x(c, c);
    for (std::size_t s = 0; s < 3; ++s)
      stages_.emplace_back(name + ".stage" + std::to_string(s), specs[s], false, rng);
    dense_ = Conv2d<T>(name + ".dense", LayerSpec::linear1x1(c, c), true, rng);
    dense_bn_ = BatchNorm2d<T>(name + ".dense_bn", c);
  }

  int which() const { return which_; }

  /// Shape propagation without touching data. `block_shape` is one layer map [N, D, S, S].
  Shape output_shape(const Shape& block_shape) const {
    Shape s = block_shape;
    if (fuse_ == FuseMode::kConcat) s[1] *= 3;
    s = stages_[0].output_shape(s);
    if (which_ == 1) s = LayerSpec::upsample2x().output_shape(s);
    s = stages_[1].output_shape(s);
    s = stages_[2].output_shape(s);
    return s;
  }

  Tensor<T> forward(const std::array<Tensor<T>, 3>& block, const Tensor<T>* carry, ForwardMode mode) {
    for (const auto& m : block) {
      require_rank(m, 4, "projection layer input");
      if (m.shape() != block[0].shape())
        throw ShapeError("projection p" + std::to_string(which_) + ": block maps disagree, " +
                         shape_str(m.shape()) + " vs " + shape_str(block[0].shape()));
    }
    const Shape out_shape = output_shape(block[0].shape());
    if (carry && carry->shape() != out_shape)
      throw ShapeError("projection p" + std::to_string(which_) + ": carry " + shape_str(carry->shape()) +
                       " does not match output " + shape_str(out_shape));
    Tensor<T> x;
    if (fuse_ == FuseMode::kConcat) {
      x = concat_channels<T>(block);
    } else {
      x = add(add(block[0], block[1]), block[2]);
    }
    Tensor<T> h = stages_[0].forward(x, mode);
    if (which_ == 1) h = upsample2x(h);
    h = stages_[1].forward(h, mode);
    h = stages_[2].forward(h, mode);
    h = dense_bn_.forward(dense_relu_.forward(dense_.forward(h, mode), mode), mode);
    if (carry) add_inplace(h, *carry);
    return h;
  }

  /// Accumulates parameter gradients. The carry's gradient equals dy.
  void backward(const Tensor<T>& dy) {
    Tensor<T> g = dense_.backward(dense_relu_.backward(dense_bn_.backward(dy)));
    g = stages_[2].backward(g);
    g = stages_[1].backward(g);
    if (which_ == 1) g = upsample2x_backward(g);
    stages_[0].backward(g, false);
  }

  void clear_saved() {
    for (auto& s : stages_) s.clear_saved();
    dense_.clear_saved();
    dense_relu_.clear_saved();
    dense_bn_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    for (auto& s : stages_) s.visit(v);
    dense_.visit(v);
    dense_bn_.visit(v);
  }

 private:
  int which_ = 1;
  FuseMode fuse_ = FuseMode::kConcat;
  std::vector<ConvBn<T>> stages_;
  Conv2d<T> dense_;
  ReLU<T> dense_relu_;
  BatchNorm2d<T> dense_bn_;
};

template <typename T>
class PyramidDecoder {
 public:
  PyramidDecoder(DecoderConfig config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    for (int j = 1; j <= 4; ++j) projections_.emplace_back(j, config_, rng);
    const std::size_t c = config_.channels;
    p5_ = ConvBn<T>("decoder.p5", LayerSpec::downsample2x(c, c), true, rng);
    p6_ = ConvBn<T>("decoder.p6", LayerSpec::downsample2x(c, c), true, rng);
  }

  const DecoderConfig& config() const { return config_; }

  /// Output shapes of z1..z6 for a batch of n, computed from layer specs alone.
  std::array<Shape, kPyramidLevels> output_shapes(std::size_t n) const {
    const Shape block{n, config_.in_channels, config_.base_size, config_.base_size};
    std::array<Shape, kPyramidLevels> out;
    for (std::size_t j = 0; j < 4; ++j) out[j] = projections_[j].output_shape(block);
    out[4] = p5_.output_shape(out[3]);
    out[5] = p6_.output_shape(out[4]);
    return out;
  }

  /// z5 = p5(z4), z6 = p6(z5).
  std::pair<Tensor<T>, Tensor<T>> extend_pyramid(const Tensor<T>& z4, ForwardMode mode) {
    require_rank(z4, 4, "extend_pyramid");
    if (z4.dim(2) < 4 || z4.dim(2) % 4 != 0 || z4.dim(3) % 4 != 0)
      throw ShapeError("extend_pyramid: z4 spatial size " + shape_str(z4.shape()) +
                       " must be a multiple of 4 (at least 4)");
    Tensor<T> z5 = p5_.forward(z4, mode);
    Tensor<T> z6 = p6_.forward(z5, mode);
    return {std::move(z5), std::move(z6)};
  }

  /// One projection step with an optional carry (exposed for tests).
  Tensor<T> project(int which, const std::array<Tensor<T>, 3>& block, const Tensor<T>* carry,
                    ForwardMode mode) {
    return projections_.at(static_cast<std::size_t>(which - 1)).forward(block, carry, mode);
  }

  FeaturePyramid<T> forward(const EncoderBlocks<T>& blocks, ForwardMode mode) {
    FeaturePyramid<T> out;
    auto& z = out.levels;
    z[0] = projections_[0].forward(blocks[0], nullptr, mode);
    for (std::size_t j = 1; j < 4; ++j) {
      std::optional<Tensor<T>> carry;
      if (config_.skip == SkipMode::kChain) carry = subsample(z[j - 1], 2);
      if (config_.skip == SkipMode::kDirect && j == 3) carry = subsample(z[0], 8);
      z[j] = projections_[j].forward(blocks[j], carry ? &*carry : nullptr, mode);
    }
    auto [z5, z6] = extend_pyramid(z[3], mode);
    z[4] = std::move(z5);
    z[5] = std::move(z6);
    return out;
  }

  /// grads: dL/dz for each level (consumed).
  void backward(std::array<Tensor<T>, kPyramidLevels> grads) {
    add_inplace(grads[3], p5_.backward(add(grads[4], p6_.backward(grads[5]))));
    for (std::size_t j = 3; j >= 1; --j) {
      projections_[j].backward(grads[j]);
      if (config_.skip == SkipMode::kChain)
        add_inplace(grads[j - 1], subsample_backward(grads[j], grads[j - 1].shape(), 2));
      if (config_.skip == SkipMode::kDirect && j == 3)
        add_inplace(grads[0], subsample_backward(grads[3], grads[0].shape(), 8));
    }
    projections_[0].backward(grads[0]);
  }

  void clear_saved() {
    for (auto& p : projections_) p.clear_saved();
    p5_.clear_saved();
    p6_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    for (auto& p : projections_) p.visit(v);
    p5_.visit(v);
    p6_.visit(v);
  }

 private:
  DecoderConfig config_;
  std::vector<ProjectionLayer<T>> projections_;
  ConvBn<T> p5_;
  ConvBn<T> p6_;
};

}  // namespace autoprom
