#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "autoprom/adam.hpp"
#include "autoprom/data.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/metrics.hpp"
#include "autoprom/model.hpp"
#include "autoprom/postprocess.hpp"
#include "autoprom/scheduler.hpp"

namespace autoprom {

NLOHMANN_JSON_SERIALIZE_ENUM(StubMaskShape, {{StubMaskShape::kEllipse, "ellipse"}, {StubMaskShape::kRectangle, "rectangle"}})

/// Everything a training run needs. Echoed verbatim into the run directory.
struct RunConfig {
  std::string data_root;
  std::string val_root;      // empty -> hold out val_fraction of data_root
  double val_fraction = 0.1;
  std::string test_root;     // optional, evaluated at the end
  std::string embeddings_dir;  // empty -> toy encoder
  std::uint64_t encoder_seed = 7;
  DetectorConfig model;
  std::size_t epochs = 50;
  double lr = 3e-4;
  PlateauOptions plateau;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;
  FocalOptions focal;
  MatchOptions matching;
  DecodeOptions decode;
  double nms_iou = 0.5;
  StubMaskShape mask_shape = StubMaskShape::kEllipse;
  EvalOptions eval;
  std::string out_dir = "runs/latest";
  std::size_t overlays = 4;

  void validate() const {
    model.validate();
    if (epochs < 1) throw ValidationError("config: epochs must be >= 1");
    if (!(lr > 0)) throw ValidationError("config: lr must be positive");
    if (plateau.floor > lr) throw ValidationError("config: lr floor exceeds the initial lr");
    if (batch_size < 2) throw ValidationError("config: batch_size must be >= 2 (batch normalisation)");
    if (val_root.empty() && !(val_fraction > 0 && val_fraction < 1))
      throw ValidationError("config: val_fraction must lie in (0, 1) when no val_root is given");
    if (!(focal.alpha >= 0 && focal.alpha <= 1) || focal.gamma < 0) throw ValidationError("config: bad focal options");
    if (!(matching.background_iou <= matching.foreground_iou)) throw ValidationError("config: background IoU above foreground IoU");
    augmentation.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"data_root", c.data_root},
       {"val_root", c.val_root},
       {"val_fraction", c.val_fraction},
       {"test_root", c.test_root},
       {"embeddings_dir", c.embeddings_dir},
       {"encoder_seed", c.encoder_seed},
       {"model", c.model},
       {"epochs", c.epochs},
       {"lr", c.lr},
       {"plateau", c.plateau},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"augment", c.augment},
       {"augmentation", c.augmentation},
       {"focal", {{"alpha", c.focal.alpha}, {"gamma", c.focal.gamma}}},
       {"matching", {{"foreground_iou", c.matching.foreground_iou}, {"background_iou", c.matching.background_iou}}},
       {"decode", {{"score_threshold", c.decode.score_threshold}, {"max_detections", c.decode.max_detections}}},
       {"nms_iou", c.nms_iou},
       {"mask_shape", c.mask_shape},
       {"eval", {{"match_radius", c.eval.match_radius}, {"ap_iou", c.eval.ap_iou}, {"pq_aggregation", c.eval.pq_aggregation}}},
       {"out_dir", c.out_dir},
       {"overlays", c.overlays}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.data_root = j.value("data_root", c.data_root);
  c.val_root = j.value("val_root", c.val_root);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.test_root = j.value("test_root", c.test_root);
  c.embeddings_dir = j.value("embeddings_dir", c.embeddings_dir);
  c.encoder_seed = j.value("encoder_seed", c.encoder_seed);
  if (j.contains("model")) c.model = j.at("model").get<DetectorConfig>();
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  if (j.contains("plateau")) c.plateau = j.at("plateau").get<PlateauOptions>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.augment = j.value("augment", c.augment);
  if (j.contains("augmentation")) c.augmentation = j.at("augmentation").get<AugmentConfig>();
  if (j.contains("focal")) {
    c.focal.alpha = j.at("focal").value("alpha", c.focal.alpha);
    c.focal.gamma = j.at("focal").value("gamma", c.focal.gamma);
  }
  if (j.contains("matching")) {
    c.matching.foreground_iou = j.at("matching").value("foreground_iou", c.matching.foreground_iou);
    c.matching.background_iou = j.at("matching").value("background_iou", c.matching.background_iou);
  }
  if (j.contains("decode")) {
    c.decode.score_threshold = j.at("decode").value("score_threshold", c.decode.score_threshold);
    c.decode.max_detections = j.at("decode").value("max_detections", c.decode.max_detections);
  }
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.mask_shape = j.value("mask_shape", c.mask_shape);
  if (j.contains("eval")) {
    c.eval.match_radius = j.at("eval").value("match_radius", c.eval.match_radius);
    c.eval.ap_iou = j.at("eval").value("ap_iou", c.eval.ap_iou);
    c.eval.pq_aggregation = j.at("eval").value("pq_aggregation", c.eval.pq_aggregation);
  }
  c.out_dir = j.value("out_dir", c.out_dir);
  c.overlays = j.value("overlays", c.overlays);
}

/// Parses a config document; unknown keys are rejected so typos surface.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  static const char* known[] = {"data_root", "val_root", "val_fraction", "test_root", "embeddings_dir", "encoder_seed",
                                "model", "epochs", "lr", "plateau", "batch_size", "seed", "augment", "augmentation",
                                "focal", "matching", "decode", "nms_iou", "mask_shape", "eval", "out_dir", "overlays"};
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known))
      throw ValidationError("config: unknown key \"" + k + "\"");
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

/// Applies "a/b/c=value" overrides; value is parsed as JSON, or taken as a
/// string when it is not valid JSON.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override must look like key=value: " + assignment);
  std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  std::replace(key.begin(), key.end(), '.', '/');
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[nlohmann::json::json_pointer("/" + key)] = value;
}

}  // namespace autoprom
