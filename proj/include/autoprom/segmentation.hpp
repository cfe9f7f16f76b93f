#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autoprom/boxes.hpp"
#include "autoprom/error.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

struct InstanceInfo {
  int class_id = 1;
  double score = 1.0;
};

/// Per-pixel instance ids (0 = background, 1..N dense) with a class entry
/// per instance; instances[id - 1] describes id.
struct InstanceSegmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;
  std::vector<InstanceInfo> instances;

  InstanceSegmentation() = default;
  InstanceSegmentation(std::size_t h, std::size_t w) : height(h), width(w), ids(h * w, 0) {}

  std::size_t count() const { return instances.size(); }
  std::int32_t& at(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  std::int32_t at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }

  /// Dense ids, every id present with at least one pixel, every id described.
  void validate(int num_classes = 0) const {
    if (ids.size() != height * width) throw ValidationError("instance map size does not match its extents");
    std::vector<std::size_t> area(instances.size() + 1, 0);
    for (std::int32_t id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) > instances.size())
        throw ValidationError("instance id " + std::to_string(id) + " has no class entry (" +
                              std::to_string(instances.size()) + " instances declared)");
      ++area[static_cast<std::size_t>(id)];
    }
    for (std::size_t i = 1; i < area.size(); ++i)
      if (area[i] == 0) throw ValidationError("instance id " + std::to_string(i) + " has no pixels");
    if (num_classes > 0)
      for (std::size_t i = 0; i < instances.size(); ++i)
        if (instances[i].class_id < 1 || instances[i].class_id > num_classes)
          throw ValidationError("instance " + std::to_string(i + 1) + " has unknown class id " +
                                std::to_string(instances[i].class_id));
  }

  /// Instance-id map as a [H, W] tensor (ids stored exactly as floats).
  Tensor<float> id_tensor() const {
    Tensor<float> t({height, width});
    for (std::size_t i = 0; i < ids.size(); ++i) t[i] = static_cast<float>(ids[i]);
    return t;
  }

  friend bool operator==(const InstanceSegmentation& a, const InstanceSegmentation& b) {
    if (a.height != b.height || a.width != b.width || a.ids != b.ids || a.instances.size() != b.instances.size())
      return false;
    for (std::size_t i = 0; i < a.instances.size(); ++i)
      if (a.instances[i].class_id != b.instances[i].class_id || a.instances[i].score != b.instances[i].score)
        return false;
    return true;
  }
};

inline std::vector<std::int32_t> ids_from_tensor(const Tensor<float>& t) {
  require_rank(t, 2, "instance map");
  std::vector<std::int32_t> ids(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const float v = t[i];
    if (!(v >= 0) || v != static_cast<float>(static_cast<std::int32_t>(v)))
      throw ValidationError("instance map holds a non-integer or negative id");
    ids[i] = static_cast<std::int32_t>(v);
  }
  return ids;
}

/// Derived per-instance geometry. The box is tight in pixel-edge
/// coordinates; the centroid is the mean (row, col) of member pixels.
struct InstanceSummary {
  int id = 0;
  int class_id = 0;
  double score = 1.0;
  Box box;
  double centroid_row = 0;
  double centroid_col = 0;
  std::size_t area = 0;
};

inline std::vector<InstanceSummary> summarize(const InstanceSegmentation& seg) {
  const std::size_t n = seg.instances.size();
  std::vector<InstanceSummary> out(n);
  std::vector<double> sum_r(n, 0.0), sum_c(n, 0.0);
  std::vector<std::size_t> rmin(n, seg.height), rmax(n, 0), cmin(n, seg.width), cmax(n, 0);
  for (std::size_t r = 0; r < seg.height; ++r)
    for (std::size_t c = 0; c < seg.width; ++c) {
      const std::int32_t id = seg.at(r, c);
      if (id <= 0) continue;
      const std::size_t i = static_cast<std::size_t>(id - 1);
      sum_r[i] += static_cast<double>(r);
      sum_c[i] += static_cast<double>(c);
      ++out[i].area;
      rmin[i] = std::min(rmin[i], r);
      rmax[i] = std::max(rmax[i], r);
      cmin[i] = std::min(cmin[i], c);
      cmax[i] = std::max(cmax[i], c);
    }
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = static_cast<int>(i + 1);
    out[i].class_id = seg.instances[i].class_id;
    out[i].score = seg.instances[i].score;
    if (out[i].area == 0) continue;
    const double a = static_cast<double>(out[i].area);
    out[i].centroid_row = sum_r[i] / a;
    out[i].centroid_col = sum_c[i] / a;
    out[i].box = {static_cast<double>(cmin[i]), static_cast<double>(rmin[i]), static_cast<double>(cmax[i] + 1),
                  static_cast<double>(rmax[i] + 1)};
  }
  return out;
}

}  // namespace autoprom
