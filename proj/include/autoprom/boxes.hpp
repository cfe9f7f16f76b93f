#pragma once

#include <algorithm>
#include <cmath>

namespace autoprom {

/// Axis-aligned corner box in image pixels; x to the right, y down.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  Box clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
            std::clamp(y2, 0.0, h)};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// |a ∩ b| / |a ∪ b|; 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

/// Width/height log-deltas are clamped to this before exponentiation.
inline const double kMaxLogScale = std::log(1000.0 / 16.0);

inline BoxDelta encode_delta(const Box& target, const Box& anchor) {
  return {(target.cx() - anchor.cx()) / anchor.width(), (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()), std::log(target.height() / anchor.height())};
}

inline Box decode_delta(const BoxDelta& d, const Box& anchor) {
  const double cx = anchor.cx() + d.dx * anchor.width();
  const double cy = anchor.cy() + d.dy * anchor.height();
  const double w = anchor.width() * std::exp(std::min(d.dw, kMaxLogScale));
  const double h = anchor.height() * std::exp(std::min(d.dh, kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace autoprom
