#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/boxes.hpp"
#include "autoprom/error.hpp"

namespace autoprom {

/// Width:height aspect of an anchor, e.g. {1, 2} is a tall 1:2 box.
struct AspectRatio {
  double width = 1;
  double height = 1;
};

struct AnchorConfig {
  std::size_t levels = 6;
  std::vector<AspectRatio> ratios{{1, 2}, {1, 1}, {2, 1}};
  std::vector<double> scales{1.0, std::pow(2.0, 1.0 / 3.0), std::pow(2.0, 2.0 / 3.0)};
  /// Base anchor side = multiplier * level stride.
  double base_multiplier = 4.0;

  std::size_t anchors_per_cell() const { return ratios.size() * scales.size(); }
};

inline void to_json(nlohmann::json& j, const AnchorConfig& c) {
  nlohmann::json ratios = nlohmann::json::array();
  for (const auto& r : c.ratios) ratios.push_back({r.width, r.height});
  j = {{"levels", c.levels}, {"ratios", ratios}, {"scales", c.scales},
       {"base_multiplier", c.base_multiplier}};
}

inline void from_json(const nlohmann::json& j, AnchorConfig& c) {
  c.levels = j.value("levels", c.levels);
  if (j.contains("ratios")) {
    c.ratios.clear();
    for (const auto& r : j.at("ratios")) c.ratios.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  }
  c.scales = j.value("scales", c.scales);
  c.base_multiplier = j.value("base_multiplier", c.base_multiplier);
}

/// Anchors of every level, flattened in head-output order: level, row,
/// column, ratio, scale.
struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<std::size_t> level_offset;
  std::vector<std::size_t> level_size;
  std::vector<std::size_t> level_stride;
  std::size_t per_cell = 0;

  std::size_t size() const { return boxes.size(); }
};

inline AnchorSet generate_anchors(const AnchorConfig& config, const std::vector<std::size_t>& level_sizes,
                                  std::size_t image_size) {
  if (level_sizes.size() != config.levels)
    throw ValidationError("generate_anchors: " + std::to_string(level_sizes.size()) +
                          " pyramid levels given, anchor config expects " +
                          std::to_string(config.levels));
  AnchorSet set;
  set.per_cell = config.anchors_per_cell();
  for (std::size_t s : level_sizes) {
    if (s == 0 || image_size % s != 0)
      throw ValidationError("generate_anchors: level size " + std::to_string(s) +
                            " gives a non-integer stride for image size " +
                            std::to_string(image_size));
    const std::size_t stride = image_size / s;
    const double base = config.base_multiplier * static_cast<double>(stride);
    set.level_offset.push_back(set.boxes.size());
    set.level_size.push_back(s);
    set.level_stride.push_back(stride);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(stride);
        const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(stride);
        for (const auto& r : config.ratios) {
          for (double scale : config.scales) {
            const double side = base * scale;
            const double w = side * std::sqrt(r.width / r.height);
            const double h = side * std::sqrt(r.height / r.width);
            set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
          }
        }
      }
    }
  }
  return set;
}

}  // namespace autoprom
