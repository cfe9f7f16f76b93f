#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "autoprom/anchors.hpp"
#include "autoprom/boxes.hpp"
#include "autoprom/error.hpp"
#include "autoprom/ops.hpp"

namespace autoprom {

struct GroundTruthBox {
  Box box;
  int class_id = 1;
};

struct MatchOptions {
  double foreground_iou = 0.5;
  double background_iou = 0.4;
};

inline constexpr int kIgnoreLabel = -1;
inline constexpr int kBackgroundLabel = 0;

/// Per-anchor training targets. Deltas are meaningful only where label >= 1.
struct BoxTargets {
  std::vector<int> labels;
  std::vector<BoxDelta> deltas;
  std::vector<int> matched_gt;
  std::size_t num_foreground = 0;
};

/// IoU >= fg -> foreground, < bg -> background, otherwise ignored. Each GT
/// additionally claims its single best anchor (lowest index on ties; a later
/// GT overrides an earlier one on the same anchor).
inline BoxTargets match_anchors(std::span<const Box> anchors, std::span<const GroundTruthBox> gt,
                                const MatchOptions& opt = {}) {
  for (std::size_t g = 0; g < gt.size(); ++g)
    if (!(gt[g].box.area() > 0) || !gt[g].box.valid())
      throw ValidationError("match_anchors: ground-truth box " + std::to_string(g) + " has zero area");
  const std::size_t n = anchors.size();
  BoxTargets t{std::vector<int>(n, kBackgroundLabel), std::vector<BoxDelta>(n), std::vector<int>(n, -1), 0};
  if (gt.empty()) return t;

  std::vector<double> best_for_gt(gt.size(), -1.0);
  std::vector<std::size_t> best_anchor(gt.size(), 0);
  for (std::size_t a = 0; a < n; ++a) {
    double best = -1.0;
    int arg = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[a], gt[g].box);
      if (v > best) {
        best = v;
        arg = static_cast<int>(g);
      }
      if (v > best_for_gt[g]) {
        best_for_gt[g] = v;
        best_anchor[g] = a;
      }
    }
    if (best >= opt.foreground_iou) {
      t.matched_gt[a] = arg;
    } else if (best >= opt.background_iou) {
      t.labels[a] = kIgnoreLabel;
    }
  }
  for (std::size_t g = 0; g < gt.size(); ++g) t.matched_gt[best_anchor[g]] = static_cast<int>(g);
  for (std::size_t a = 0; a < n; ++a) {
    const int g = t.matched_gt[a];
    if (g < 0) continue;
    t.labels[a] = gt[static_cast<std::size_t>(g)].class_id;
    t.deltas[a] = encode_delta(gt[static_cast<std::size_t>(g)].box, anchors[a]);
    ++t.num_foreground;
  }
  return t;
}

struct FocalOptions {
  double alpha = 0.5;
  double gamma = 2.0;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -alpha_t (1 - p_t)^gamma log(p_t), p_t clamped at 1e-12.
inline double focal_term(double p_t, double alpha_t, double gamma) {
  return -alpha_t * std::pow(1.0 - p_t, gamma) * std::log(std::max(p_t, kProbabilityFloor));
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Sigmoid focal loss over logits [A, K] for one image, summed over
/// non-ignored anchors and classes and divided by max(1, #foreground).
/// When grad is non-null, scale * dL/dlogit is accumulated into it.
template <typename T>
double focal_loss(std::span<const T> logits, const BoxTargets& targets, std::size_t num_classes,
                  const FocalOptions& opt = {}, T* grad = nullptr, double scale = 1.0) {
  const std::size_t anchors = targets.labels.size();
  if (logits.size() != anchors * num_classes)
    throw ShapeError("focal_loss: logits size " + std::to_string(logits.size()) + " != anchors x classes");
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, targets.num_foreground));
  const double gamma = opt.gamma;
  const bool square = gamma == 2.0;
  const double log_floor = std::log(kProbabilityFloor);
  const std::uint64_t salt = kink::enabled ? kink::next_salt() : 0;
  double total = 0.0;
  for (std::size_t a = 0; a < anchors; ++a) {
    const int label = targets.labels[a];
    if (label == kIgnoreLabel) continue;
    for (std::size_t k = 0; k < num_classes; ++k) {
      const std::size_t idx = a * num_classes + k;
      const double x = logits[idx];
      const bool positive = label == static_cast<int>(k) + 1;
      // p_t = sigmoid(z) with z = +-x; log p_t = -log1p(e^{-|z|}) - max(-z, 0).
      const double z = positive ? x : -x;
      const double e = std::exp(-std::abs(z));
      const double p_t = z >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      const double q = z >= 0 ? e / (1.0 + e) : 1.0 / (1.0 + e);  // 1 - p_t
      const double raw_log = -std::log1p(e) - std::max(-z, 0.0);
      const bool clamped = raw_log < log_floor;
      const double log_pt = clamped ? log_floor : raw_log;
      const double alpha_t = positive ? opt.alpha : 1.0 - opt.alpha;
      if (kink::enabled) kink::mix(salt + idx, clamped);
      const double q_gamma = square ? q * q : std::pow(q, gamma);
      total += -alpha_t * q_gamma * log_pt;
      if (grad) {
        // d/dx of -alpha_t q^g log p_t, with dp_t/dx = +-p_t q.
        double d_dpt;
        if (gamma == 0.0) {
          d_dpt = clamped ? 0.0 : -alpha_t / p_t;
          grad[idx] += static_cast<T>(scale * norm * d_dpt * (positive ? 1.0 : -1.0) * p_t * q);
          continue;
        }
        const double q_gm1 = square ? q : std::pow(q, gamma - 1.0);
        // Multiply through by p_t q to avoid dividing by a tiny p_t.
        double d = alpha_t * gamma * q_gm1 * log_pt * p_t * q;
        if (!clamped) d -= alpha_t * q_gamma * q;
        grad[idx] += static_cast<T>(scale * norm * (positive ? 1.0 : -1.0) * d);
      }
    }
  }
  return total * norm;
}

inline constexpr double kSmoothL1Beta = 1.0 / 9.0;

inline double smooth_l1(double r, double beta = kSmoothL1Beta) {
  const double a = std::abs(r);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

/// Smooth-L1 over foreground deltas [A, 4], divided by #foreground
/// (0 when there are none).
template <typename T>
double box_loss(std::span<const T> deltas, const BoxTargets& targets, T* grad = nullptr, double scale = 1.0,
                double beta = kSmoothL1Beta) {
  const std::size_t anchors = targets.labels.size();
  if (deltas.size() != anchors * 4)
    throw ShapeError("box_loss: deltas size " + std::to_string(deltas.size()) + " != anchors x 4");
  if (targets.num_foreground == 0) return 0.0;
  const double norm = 1.0 / static_cast<double>(targets.num_foreground);
  const std::uint64_t salt = kink::enabled ? kink::next_salt() : 0;
  double total = 0.0;
  for (std::size_t a = 0; a < anchors; ++a) {
    if (targets.labels[a] < 1) continue;
    const BoxDelta& t = targets.deltas[a];
    const double target[4] = {t.dx, t.dy, t.dw, t.dh};
    for (std::size_t c = 0; c < 4; ++c) {
      const double r = deltas[a * 4 + c] - target[c];
      const bool quadratic = std::abs(r) < beta;
      if (kink::enabled) kink::mix(salt + a * 4 + c, quadratic);
      total += smooth_l1(r, beta);
      if (grad) {
        const double d = quadratic ? r / beta : (r > 0 ? 1.0 : -1.0);
        grad[a * 4 + c] += static_cast<T>(scale * norm * d);
      }
    }
  }
  return total * norm;
}

}  // namespace autoprom
