#pragma once

// From head outputs to box prompts and instance maps: decode, threshold,
// class-wise NMS, prompt-file exchange, the stand-in mask decoder and the
// overlap resolution that turns per-box masks into one instance map.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/anchors.hpp"
#include "autoprom/boxes.hpp"
#include "autoprom/error.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/segmentation.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

struct Detection {
  Box box;
  int class_id = 1;
  double score = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct DecodeOptions {
  double score_threshold = 0.05;
  std::size_t max_detections = 1000;
};

/// Every (anchor, class) pair scoring >= threshold becomes a candidate; the
/// top max_detections by score survive (ties keep anchor order).
template <typename T>
std::vector<Detection> decode_and_filter(std::span<const T> class_logits, std::span<const T> box_deltas,
                                         const AnchorSet& anchors, std::size_t num_classes, double image_width,
                                         double image_height, const DecodeOptions& opt = {}) {
  const std::size_t n = anchors.size();
  if (class_logits.size() != n * num_classes || box_deltas.size() != n * 4)
    throw ShapeError("decode_and_filter: head outputs do not match " + std::to_string(n) + " anchors");
  struct Candidate {
    std::size_t index;
    double score;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < class_logits.size(); ++i) {
    const double s = sigmoid(static_cast<double>(class_logits[i]));
    if (s >= opt.score_threshold) cands.push_back({i, s});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (cands.size() > opt.max_detections) cands.resize(opt.max_detections);

  std::vector<Detection> out;
  out.reserve(cands.size());
  for (const auto& c : cands) {
    const std::size_t a = c.index / num_classes;
    const BoxDelta d{box_deltas[a * 4], box_deltas[a * 4 + 1], box_deltas[a * 4 + 2], box_deltas[a * 4 + 3]};
    const Box b = decode_delta(d, anchors.boxes[a]).clipped(image_width, image_height);
    if (!b.valid()) continue;
    out.push_back({b, static_cast<int>(c.index % num_classes) + 1, c.score});
  }
  return out;
}

/// Greedy class-wise suppression of boxes overlapping a higher-scored kept
/// box by IoU > threshold. Equal scores are ordered by input position.
/// Output is in descending score order.
inline std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold = 0.5) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<char> suppressed(dets.size(), 0);
  std::vector<Detection> kept;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (suppressed[i]) continue;
    const Detection& d = dets[order[i]];
    kept.push_back(d);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (suppressed[j]) continue;
      const Detection& o = dets[order[j]];
      if (o.class_id == d.class_id && iou(d.box, o.box) > iou_threshold) suppressed[j] = 1;
    }
  }
  return kept;
}

/// Box prompts for one image, scores descending, pixel coordinates of the
/// original image.
struct PromptFile {
  std::string image_id;
  std::vector<Detection> boxes;

  friend bool operator==(const PromptFile&, const PromptFile&) = default;
};

inline nlohmann::json to_json_value(const PromptFile& p) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& d : p.boxes)
    boxes.push_back({{"x1", d.box.x1}, {"y1", d.box.y1}, {"x2", d.box.x2}, {"y2", d.box.y2},
                     {"class", d.class_id}, {"score", d.score}});
  return {{"image_id", p.image_id}, {"boxes", boxes}};
}

inline PromptFile prompt_from_json(const nlohmann::json& j) {
  PromptFile p;
  try {
    p.image_id = j.at("image_id").get<std::string>();
    for (const auto& b : j.at("boxes")) {
      Detection d{{b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                   b.at("y2").get<double>()},
                  b.at("class").get<int>(),
                  b.at("score").get<double>()};
      if (!d.box.valid()) throw ValidationError("prompt box with non-positive extent");
      p.boxes.push_back(d);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("prompt file does not match schema: ") + e.what());
  }
  return p;
}

/// Writes the prompt file (boxes clipped, sorted by descending score).
/// Doubles are written with round-trip precision.
inline PromptFile emit_prompts(std::vector<Detection> dets, const std::string& image_id,
                               const std::filesystem::path& path, double image_width, double image_height) {
  for (auto& d : dets) d.box = d.box.clipped(image_width, image_height);
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  PromptFile p{image_id, std::move(dets)};
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot write prompt file " + path.string());
  os << to_json_value(p).dump(2) << '\n';
  if (!os) throw RuntimeAbort("write failed for prompt file " + path.string());
  return p;
}

inline PromptFile load_prompts(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open prompt file " + path.string());
  try {
    return prompt_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

enum class StubMaskShape { kEllipse, kRectangle };

/// Stand-in for the frozen mask decoder: one binary mask per prompt box,
/// [N, H, W]. A pixel belongs to a box when its centre lies inside the box
/// (rectangle) or inside the box's inscribed ellipse.
inline Tensor<float> stub_mask_decoder(std::span<const Detection> prompts, std::size_t height, std::size_t width,
                                       StubMaskShape shape = StubMaskShape::kEllipse) {
  Tensor<float> masks({prompts.size(), height, width});
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Box b = prompts[i].box.clipped(w, h);
    if (!b.valid()) continue;
    const double ax = 0.5 * b.width(), ay = 0.5 * b.height(), cx = b.cx(), cy = b.cy();
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y1 - 0.5)));
    const auto r1 = static_cast<std::size_t>(std::min(h, std::ceil(b.y2)));
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x1 - 0.5)));
    const auto c1 = static_cast<std::size_t>(std::min(w, std::ceil(b.x2)));
    float* plane = masks.data() + i * height * width;
    for (std::size_t r = r0; r < r1; ++r) {
      const double py = static_cast<double>(r) + 0.5;
      if (py < b.y1 || py > b.y2) continue;
      for (std::size_t c = c0; c < c1; ++c) {
        const double px = static_cast<double>(c) + 0.5;
        if (px < b.x1 || px > b.x2) continue;
        bool inside = true;
        if (shape == StubMaskShape::kEllipse) {
          const double u = (px - cx) / ax, v = (py - cy) / ay;
          inside = u * u + v * v <= 1.0;
        }
        if (inside) plane[r * width + c] = 1.0f;
      }
    }
  }
  return masks;
}

/// Resolves overlaps by score: each pixel goes to the highest-scored mask
/// covering it (earlier mask on ties). Instances left without pixels are
/// dropped; surviving ids are 1..N in descending score order.
inline InstanceSegmentation merge_masks(const Tensor<float>& masks, std::span<const InstanceInfo> info) {
  require_rank(masks, 3, "merge_masks");
  const std::size_t n = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  if (info.size() != n)
    throw ValidationError("merge_masks: " + std::to_string(n) + " masks but " + std::to_string(info.size()) +
                          " class/score entries");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return info[a].score > info[b].score; });

  std::vector<std::int32_t> owner(h * w, -1);
  std::vector<std::size_t> area(n, 0);
  for (std::size_t rank = 0; rank < n; ++rank) {
    const float* plane = masks.data() + order[rank] * h * w;
    for (std::size_t p = 0; p < h * w; ++p)
      if (plane[p] > 0.5f && owner[p] < 0) {
        owner[p] = static_cast<std::int32_t>(rank);
        ++area[rank];
      }
  }
  InstanceSegmentation seg(h, w);
  std::vector<std::int32_t> new_id(n, 0);
  for (std::size_t rank = 0; rank < n; ++rank) {
    if (area[rank] == 0) continue;
    seg.instances.push_back(info[order[rank]]);
    new_id[rank] = static_cast<std::int32_t>(seg.instances.size());
  }
  for (std::size_t p = 0; p < h * w; ++p)
    if (owner[p] >= 0) seg.ids[p] = new_id[static_cast<std::size_t>(owner[p])];
  return seg;
}

}  // namespace autoprom
