#pragma once

// Trainable detector (projection decoder + detection head) over frozen
// encoder blocks, its batch loss, and checkpoint directories.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/anchors.hpp"
#include "autoprom/decoder.hpp"
#include "autoprom/encoder.hpp"
#include "autoprom/head.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/parameter.hpp"
#include "autoprom/tensor_io.hpp"

namespace autoprom {

struct DetectorConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  AnchorConfig anchors;
  std::size_t num_classes = 2;
  std::size_t head_depth = 4;
  double prior = 0.01;

  /// Decoder input width and base size follow the encoder.
  DecoderConfig resolved_decoder() const {
    DecoderConfig d = decoder;
    d.in_channels = encoder.embed_dim;
    d.base_size = encoder.grid_size();
    return d;
  }

  HeadConfig head() const {
    return {decoder.channels, num_classes, anchors.anchors_per_cell(), head_depth, prior};
  }

  void validate() const {
    encoder.validate();
    resolved_decoder().validate();
    if (anchors.levels != kPyramidLevels)
      throw ValidationError("anchor config declares " + std::to_string(anchors.levels) + " levels, the pyramid has " +
                            std::to_string(kPyramidLevels));
    if (num_classes == 0) throw ValidationError("detector: num_classes must be >= 1");
    if (!(prior > 0 && prior < 1)) throw ValidationError("detector: prior must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"encoder", c.encoder}, {"decoder", c.decoder},       {"anchors", c.anchors},
       {"num_classes", c.num_classes}, {"head_depth", c.head_depth}, {"prior", c.prior}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("decoder")) c.decoder = j.at("decoder").get<DecoderConfig>();
  if (j.contains("anchors")) c.anchors = j.at("anchors").get<AnchorConfig>();
  c.num_classes = j.value("num_classes", c.num_classes);
  c.head_depth = j.value("head_depth", c.head_depth);
  c.prior = j.value("prior", c.prior);
}

struct LossBreakdown {
  double focal = 0;
  double box = 0;
  double total() const { return focal + box; }
};

template <typename T>
class Detector {
 public:
  Detector(DetectorConfig config, std::uint64_t seed)
      : config_((config.validate(), config)),
        rng_(seed),
        decoder_(config_.resolved_decoder(), rng_),
        head_(config_.head(), rng_) {
    anchors_ = generate_anchors(config_.anchors, config_.resolved_decoder().level_sizes(), config_.encoder.image_size);
  }

  const DetectorConfig& config() const { return config_; }
  const AnchorSet& anchors() const { return anchors_; }
  PyramidDecoder<T>& decoder() { return decoder_; }
  DetectionHead<T>& head() { return head_; }

  HeadOutput<T> forward(const EncoderBlocks<T>& blocks, ForwardMode mode) {
    FeaturePyramid<T> pyr = decoder_.forward(blocks, mode);
    if (mode.record)
      for (std::size_t j = 0; j < kPyramidLevels; ++j) level_shapes_[j] = pyr.levels[j].shape();
    return head_.forward(pyr, mode);
  }

  /// Back-propagates the most recent recorded forward.
  void backward(const HeadOutput<T>& grad) { decoder_.backward(head_.backward(grad, level_shapes_)); }

  void clear_saved() {
    decoder_.clear_saved();
    head_.clear_saved();
  }

  void visit(const StateVisitor<T>& v) {
    decoder_.visit(v);
    head_.visit(v);
  }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> refs;
    visit({[&](Parameter<T>& p) { refs.push_back(&p); }, [](Buffer<T>) {}});
    return refs;
  }

  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    visit({[](Parameter<T>&) {}, [&](Buffer<T> b) { out.push_back(b); }});
    return out;
  }

  std::size_t trainable_count() { return count_parameters(parameters(), true); }

  /// Mean over the batch of per-image focal + smooth-L1 losses. When grad is
  /// non-null it receives dLoss/doutput.
  LossBreakdown loss(const HeadOutput<T>& out, std::span<const BoxTargets> targets, const FocalOptions& focal,
                     HeadOutput<T>* grad) const {
    const std::size_t n = out.class_logits.dim(0), a = out.class_logits.dim(1), k = out.class_logits.dim(2);
    if (targets.size() != n) throw ValidationError("detector loss: one target set per image required");
    if (grad) *grad = {Tensor<T>(out.class_logits.shape()), Tensor<T>(out.box_deltas.shape())};
    LossBreakdown l;
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      std::span<const T> logits(out.class_logits.data() + b * a * k, a * k);
      std::span<const T> deltas(out.box_deltas.data() + b * a * 4, a * 4);
      l.focal += scale * focal_loss<T>(logits, targets[b], k, focal,
                                       grad ? grad->class_logits.data() + b * a * k : nullptr, scale);
      l.box += scale * box_loss<T>(deltas, targets[b], grad ? grad->box_deltas.data() + b * a * 4 : nullptr, scale);
    }
    return l;
  }

 private:
  DetectorConfig config_;
  std::mt19937_64 rng_;
  PyramidDecoder<T> decoder_;
  DetectionHead<T> head_;
  AnchorSet anchors_;
  std::array<Shape, kPyramidLevels> level_shapes_;
};

/// Trainable parameter count of a configuration (builds it once).
inline std::size_t trainable_parameter_count(const DetectorConfig& cfg) {
  Detector<float> d(cfg, 0);
  return d.trainable_count();
}

// ----------------------------------------------------------- checkpoints
//
// dir/manifest.json + dir/tensors/<name>.tsr for every parameter and buffer.

inline constexpr const char* kCheckpointFormat = "autoprom-checkpoint-1";

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, Detector<T>& model, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  const fs::path staging = dir.string() + ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging / "tensors");
  nlohmann::json tensors = nlohmann::json::array();
  auto write = [&](const std::string& name, const Tensor<T>& t, const char* kind, bool trainable) {
    save_tensor(staging / "tensors" / (name + ".tsr"), t.template cast<float>());
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"kind", kind}, {"trainable", trainable}});
  };
  model.visit({[&](Parameter<T>& p) { write(p.name, p.value, "parameter", p.trainable); },
               [&](Buffer<T> b) { write(b.name, *b.tensor, "buffer", false); }});
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"config", model.config()},
                             {"trainable_parameters", model.trainable_count()},
                             {"tensors", tensors}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
  {
    std::ofstream os(staging / "manifest.json");
    os << manifest.dump(2) << '\n';
    if (!os) throw RuntimeAbort("cannot write checkpoint manifest in " + staging.string());
  }
  // The previous checkpoint survives until the new one is complete.
  fs::remove_all(dir);
  fs::rename(staging, dir);
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  nlohmann::json m = read_json_file(dir / "manifest.json");
  if (m.value("format", "") != kCheckpointFormat)
    throw ValidationError(dir.string() + " is not a checkpoint (format tag missing or unknown)");
  return m;
}

inline DetectorConfig checkpoint_config(const std::filesystem::path& dir) {
  return read_checkpoint_manifest(dir).at("config").get<DetectorConfig>();
}

/// Restores every parameter and buffer. Any mismatch in the set of names or
/// in shapes is reported as one named-tensor diff.
template <typename T>
void load_checkpoint(const std::filesystem::path& dir, Detector<T>& model) {
  const nlohmann::json manifest = read_checkpoint_manifest(dir);
  std::map<std::string, Shape> stored;
  for (const auto& t : manifest.at("tensors")) stored[t.at("name").get<std::string>()] = t.at("shape").get<Shape>();
  std::map<std::string, Tensor<T>*> live;
  model.visit({[&](Parameter<T>& p) { live[p.name] = &p.value; }, [&](Buffer<T> b) { live[b.name] = b.tensor; }});

  std::string diff;
  for (const auto& [name, t] : live) {
    const auto it = stored.find(name);
    if (it == stored.end())
      diff += "  - " + name + " " + shape_str(t->shape()) + " missing from checkpoint\n";
    else if (it->second != t->shape())
      diff += "  ~ " + name + " checkpoint " + shape_str(it->second) + " vs model " + shape_str(t->shape()) + "\n";
  }
  for (const auto& [name, shape] : stored)
    if (!live.count(name)) diff += "  + " + name + " " + shape_str(shape) + " not in model\n";
  if (!diff.empty()) throw ValidationError("checkpoint " + dir.string() + " does not match the model:\n" + diff);

  for (auto& [name, t] : live) {
    Tensor<T> v = load_tensor<T>(dir / "tensors" / (name + ".tsr"));
    if (v.shape() != t->shape()) throw ValidationError("tensor file for " + name + " has shape " + shape_str(v.shape()));
    *t = std::move(v);
  }
}

}  // namespace autoprom
