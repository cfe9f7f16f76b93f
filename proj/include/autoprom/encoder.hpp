#pragma once

// Frozen feature source for the detector: either a seeded random-projection
// stand-in encoder or per-layer embeddings exported from a real pretrained
// encoder. Both produce one [D, S, S] map per encoder layer.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/error.hpp"
#include "autoprom/layers.hpp"
#include "autoprom/tensor.hpp"
#include "autoprom/tensor_io.hpp"

namespace autoprom {

struct EncoderConfig {
  std::size_t layer_count = 12;
  std::vector<std::size_t> global_attention{2, 5, 8, 11};
  std::size_t patch_size = 16;
  std::size_t embed_dim = 32;
  std::size_t image_size = 256;

  std::size_t grid_size() const { return image_size / patch_size; }

  void validate() const {
    if (global_attention.size() != 4)
      throw ValidationError("encoder: expected 4 global-attention indices, got " +
                            std::to_string(global_attention.size()));
    for (std::size_t i = 1; i < global_attention.size(); ++i)
      if (global_attention[i] <= global_attention[i - 1])
        throw ValidationError("encoder: global-attention indices must be strictly increasing");
    if (global_attention.back() >= layer_count)
      throw ValidationError("encoder: global-attention index " +
                            std::to_string(global_attention.back()) + " out of range for " +
                            std::to_string(layer_count) + " layers");
    if (patch_size == 0 || embed_dim == 0 || image_size == 0)
      throw ValidationError("encoder: patch size, embed dim and image size must be positive");
    if (image_size % patch_size != 0)
      throw ValidationError("encoder: image size " + std::to_string(image_size) +
                            " not divisible by patch size " + std::to_string(patch_size));
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"layer_count", c.layer_count},
       {"global_attention_indices", c.global_attention},
       {"patch_size", c.patch_size},
       {"embed_dim", c.embed_dim},
       {"image_size", c.image_size}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.layer_count = j.value("layer_count", c.layer_count);
  c.global_attention = j.value("global_attention_indices", c.global_attention);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.image_size = j.value("image_size", c.image_size);
}

/// Per-layer encoder outputs for one image, each [D, S, S].
template <typename T>
struct LayerFeatures {
  std::vector<Tensor<T>> features;
  EncoderConfig config;

  void validate() const {
    config.validate();
    if (features.size() != config.layer_count)
      throw ValidationError("layer features: expected " + std::to_string(config.layer_count) +
                            " layers, got " + std::to_string(features.size()));
    const Shape expected{config.embed_dim, config.grid_size(), config.grid_size()};
    for (std::size_t l = 0; l < features.size(); ++l)
      if (features[l].shape() != expected)
        throw ShapeError("layer " + std::to_string(l) + " has shape " +
                         shape_str(features[l].shape()) + ", expected " + shape_str(expected));
  }
};

/// Layer indices of the four three-layer blocks; block i ends at the i-th
/// global-attention layer.
using BlockLayout = std::array<std::array<std::size_t, 3>, 4>;

inline BlockLayout partition_blocks(const EncoderConfig& config) {
  config.validate();
  BlockLayout blocks{};
  std::size_t next = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t end = config.global_attention[b];
    if (end < 2 || end - 2 != next)
      throw ValidationError("partition_blocks: global-attention index " + std::to_string(end) +
                            " does not close a run of 3 consecutive layers starting at " +
                            std::to_string(next));
    blocks[b] = {end - 2, end - 1, end};
    next = end + 1;
  }
  if (next != config.layer_count)
    throw ValidationError("partition_blocks: blocks cover " + std::to_string(next) + " of " +
                          std::to_string(config.layer_count) + " layers");
  return blocks;
}

/// Blocks of batched per-layer maps ([N, D, S, S] each), ready for the decoder.
template <typename T>
using EncoderBlocks = std::array<std::array<Tensor<T>, 3>, 4>;

template <typename T>
EncoderBlocks<T> gather_blocks(const std::vector<Tensor<T>>& layers, const EncoderConfig& config) {
  const BlockLayout layout = partition_blocks(config);
  if (layers.size() != config.layer_count)
    throw ValidationError("gather_blocks: expected " + std::to_string(config.layer_count) +
                          " layer maps, got " + std::to_string(layers.size()));
  EncoderBlocks<T> blocks;
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t k = 0; k < 3; ++k) blocks[b][k] = layers[layout[b][k]];
  return blocks;
}

/// Batch several images' features: layer l becomes [N, D, S, S].
template <typename T>
std::vector<Tensor<T>> batch_features(std::span<const LayerFeatures<T>* const> items) {
  if (items.empty()) throw ValidationError("batch_features: empty batch");
  const std::size_t layers = items.front()->features.size();
  std::vector<Tensor<T>> out;
  out.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Tensor<T>> parts;
    parts.reserve(items.size());
    for (const auto* f : items) parts.push_back(f->features.at(l));
    out.push_back(stack<T>(parts));
  }
  return out;
}

/// Untrained, seeded stand-in encoder: a patchify projection followed by
/// residual 3x3 mixing layers, h_l = h_{l-1} + tanh(conv_l(h_{l-1})).
/// Every parameter is frozen.
template <typename T>
class ToyEncoder {
 public:
  ToyEncoder(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    patchify_ = Conv2d<T>("encoder.patchify",
                          LayerSpec::conv2d(3, config_.embed_dim, config_.patch_size,
                                            config_.patch_size, 0),
                          false, rng);
    for (std::size_t l = 0; l < config_.layer_count; ++l)
      mixers_.emplace_back("encoder.layer" + std::to_string(l),
                           LayerSpec::conv2d(config_.embed_dim, config_.embed_dim, 3, 1, 1), false,
                           rng);
  }

  const EncoderConfig& config() const { return config_; }

  /// images: [N, 3, H, W] with values in [0, 1]. Returns L maps [N, D, S, S].
  std::vector<Tensor<T>> forward_batch(const Tensor<T>& images) {
    require_rank(images, 4, "toy encoder");
    if (images.dim(1) != 3 || images.dim(2) != config_.image_size ||
        images.dim(3) != config_.image_size)
      throw ShapeError("toy encoder: expected [N,3," + std::to_string(config_.image_size) + "," +
                       std::to_string(config_.image_size) + "], got " +
                       shape_str(images.shape()));
    for (std::size_t i = 0; i < images.numel(); ++i)
      if (!(images[i] >= T{0} && images[i] <= T{1}))
        throw ValidationError("toy encoder: pixel values must lie in [0, 1]");
    // One image at a time: GEMM blocking depends on the column count, and
    // features must not depend on which batch an image landed in.
    std::vector<std::vector<Tensor<T>>> per_layer(mixers_.size());
    for (std::size_t n = 0; n < images.dim(0); ++n) {
      std::vector<Tensor<T>> maps = run(slice_leading(images, n));
      for (std::size_t l = 0; l < maps.size(); ++l) per_layer[l].push_back(slice_leading(maps[l], 0));
    }
    std::vector<Tensor<T>> out;
    out.reserve(mixers_.size());
    for (const auto& items : per_layer) out.push_back(stack<T>(items));
    return out;
  }

  /// image: [3, H, W].
  LayerFeatures<T> forward(const Tensor<T>& image) {
    require_rank(image, 3, "toy encoder");
    Tensor<T> batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    std::vector<Tensor<T>> maps = forward_batch(batch);
    LayerFeatures<T> f{{}, config_};
    for (auto& m : maps) f.features.push_back(slice_leading(m, 0));
    return f;
  }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> refs;
    StateVisitor<T> v{[&](Parameter<T>& p) { refs.push_back(&p); }, [](Buffer<T>) {}};
    patchify_.visit(v);
    for (auto& m : mixers_) m.visit(v);
    return refs;
  }

 private:
  // image: [3, H, W] -> L maps of [1, D, S, S]
  std::vector<Tensor<T>> run(const Tensor<T>& image) {
    Tensor<T> centered({1, image.dim(0), image.dim(1), image.dim(2)});
    for (std::size_t i = 0; i < image.numel(); ++i) centered[i] = image[i] - T(0.5);
    Tensor<T> h = patchify_.forward(centered, kInference);
    std::vector<Tensor<T>> out;
    out.reserve(mixers_.size());
    for (auto& mixer : mixers_) {
      Tensor<T> mixed = mixer.forward(h, kInference);
      for (std::size_t i = 0; i < h.numel(); ++i) h[i] += std::tanh(mixed[i]);
      out.push_back(h);
    }
    return out;
  }

  EncoderConfig config_;
  Conv2d<T> patchify_;
  std::vector<Conv2d<T>> mixers_;
};

// Embedding archive: a directory holding manifest.json and one TSR1 file per
// layer ("layer_00.tsr", ...), each [D, S, S].

inline std::string layer_file_name(std::size_t layer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%02zu.tsr", layer);
  return buf;
}

template <typename T>
void save_embeddings(const std::filesystem::path& dir, const LayerFeatures<T>& f,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  f.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = f.config;
  manifest["tap"] = "post-layer";
  std::vector<std::string> files;
  for (std::size_t l = 0; l < f.features.size(); ++l) {
    files.push_back(layer_file_name(l));
    save_tensor(dir / files.back(), f.features[l]);
  }
  manifest["layers"] = files;
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw RuntimeAbort("cannot write " + (dir / "manifest.json").string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

template <typename T>
LayerFeatures<T> load_embeddings(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_json_file(dir / "manifest.json");
  LayerFeatures<T> f;
  try {
    f.config = manifest.get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (!manifest.contains("embed_dim")) f.config.embed_dim = 0;
  f.config.layer_count = manifest.at("layer_count").get<std::size_t>();
  for (std::size_t l = 0; l < f.config.layer_count; ++l) {
    const auto path = dir / layer_file_name(l);
    if (!std::filesystem::exists(path))
      throw ValidationError("embedding archive " + dir.string() + " is missing layer " +
                            std::to_string(l) + " (" + path.filename().string() + "); manifest declares " +
                            std::to_string(f.config.layer_count) + " layers");
    f.features.push_back(load_tensor<T>(path));
  }
  if (f.config.embed_dim == 0 && !f.features.empty()) f.config.embed_dim = f.features[0].dim(0);
  f.validate();
  return f;
}

}  // namespace autoprom
