#pragma once

// Brute-force reference implementations, written independently of the
// library, plus random instance generators. Used by the unit suite and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "autoprom/autoprom.hpp"

namespace oracle {

using autoprom::Box;
using autoprom::Detection;
using autoprom::InstanceSegmentation;

// ------------------------------------------------------------------ boxes

inline double overlap_1d(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

inline double box_iou(const Box& a, const Box& b) {
  const double inter = overlap_1d(a.x1, a.x2, b.x1, b.x2) * overlap_1d(a.y1, a.y2, b.y1, b.y2);
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1), area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Priority order: higher score first, then lower input index.
inline std::vector<std::size_t> priority_order(const std::vector<Detection>& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return d[a].score != d[b].score ? d[a].score > d[b].score : a < b;
  });
  return idx;
}

/// A detection survives iff no surviving detection of the same class with
/// higher priority overlaps it by more than the threshold. O(n^2).
inline std::vector<Detection> nms_reference(const std::vector<Detection>& dets, double thr) {
  const auto order = priority_order(dets);
  std::vector<bool> alive(order.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < i && ok; ++j)
      if (alive[j] && dets[order[j]].class_id == dets[order[i]].class_id &&
          box_iou(dets[order[j]].box, dets[order[i]].box) > thr)
        ok = false;
    alive[i] = ok;
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < order.size(); ++i)
    if (alive[i]) out.push_back(dets[order[i]]);
  return out;
}

inline std::vector<Detection> random_detections(std::mt19937_64& rng, std::size_t n, int classes) {
  std::uniform_real_distribution<double> pos(0, 120), ext(4, 40), score(0, 1);
  std::uniform_int_distribution<int> cls(1, classes), coin(0, 9);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    double s = score(rng);
    if (coin(rng) == 0) s = std::round(s * 4) / 4;  // occasional exact ties
    out.push_back({{x, y, x + ext(rng), y + ext(rng)}, cls(rng), s});
  }
  return out;
}

// --------------------------------------------------------------------- AP

struct ApCase {
  std::vector<std::vector<Detection>> detections;
  std::vector<std::vector<autoprom::GroundTruthBox>> truth;
};

/// Enumerates every score cutoff; interpolated precision at each recall step
/// i/G is the best precision of any cutoff reaching that recall. Scores must
/// be distinct.
inline std::optional<double> ap_reference(const ApCase& c, double thr, int class_id) {
  struct Flagged {
    double score;
    bool tp;
  };
  std::vector<Flagged> flagged;
  std::size_t g_total = 0;
  for (std::size_t im = 0; im < c.truth.size(); ++im) {
    std::vector<Box> gt;
    for (const auto& g : c.truth[im])
      if (class_id == 0 || g.class_id == class_id) gt.push_back(g.box);
    g_total += gt.size();
    std::vector<Detection> d;
    for (const auto& x : c.detections[im])
      if (class_id == 0 || x.class_id == class_id) d.push_back(x);
    std::sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(gt.size(), false);
    for (const auto& x : d) {
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < gt.size(); ++g)
        if (!used[g] && box_iou(x.box, gt[g]) > best_iou) {
          best_iou = box_iou(x.box, gt[g]);
          best = static_cast<int>(g);
        }
      const bool tp = best >= 0 && best_iou >= thr;
      if (tp) used[static_cast<std::size_t>(best)] = true;
      flagged.push_back({x.score, tp});
    }
  }
  if (g_total == 0) return std::nullopt;
  std::set<double, std::greater<>> cutoffs;
  for (const auto& f : flagged) cutoffs.insert(f.score);
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  for (double t : cutoffs) {
    std::size_t kept = 0, tp = 0;
    for (const auto& f : flagged)
      if (f.score >= t) {
        ++kept;
        tp += f.tp;
      }
    points.push_back({static_cast<double>(tp) / static_cast<double>(g_total),
                      static_cast<double>(tp) / static_cast<double>(kept)});
  }
  double ap = 0;
  for (std::size_t i = 1; i <= g_total; ++i) {
    const double level = static_cast<double>(i) / static_cast<double>(g_total);
    double best = 0;
    for (const auto& [r, p] : points)
      if (r >= level - 1e-12) best = std::max(best, p);
    ap += best / static_cast<double>(g_total);
  }
  return ap;
}

/// Up to `max_dets` detections over one or two images, distinct scores,
/// placed near GT so that matches happen.
inline ApCase random_ap_case(std::mt19937_64& rng, std::size_t max_dets, int classes) {
  ApCase c;
  std::uniform_int_distribution<std::size_t> images(1, 2), ngt(0, 4);
  std::uniform_int_distribution<int> cls(1, classes);
  std::uniform_real_distribution<double> pos(0, 80), ext(8, 30), jit(-6, 6), unit(0, 1);
  const std::size_t n_img = images(rng);
  std::vector<double> scores;
  std::size_t total = std::uniform_int_distribution<std::size_t>(0, max_dets)(rng);
  for (std::size_t i = 0; i < total; ++i) scores.push_back(unit(rng));
  c.detections.resize(n_img);
  c.truth.resize(n_img);
  for (std::size_t im = 0; im < n_img; ++im) {
    const std::size_t g = ngt(rng);
    for (std::size_t i = 0; i < g; ++i) {
      const double x = pos(rng), y = pos(rng);
      c.truth[im].push_back({{x, y, x + ext(rng), y + ext(rng)}, cls(rng)});
    }
  }
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t im = std::uniform_int_distribution<std::size_t>(0, n_img - 1)(rng);
    Box b;
    if (!c.truth[im].empty() && unit(rng) < 0.7) {
      const Box& t = c.truth[im][std::uniform_int_distribution<std::size_t>(0, c.truth[im].size() - 1)(rng)].box;
      b = {t.x1 + jit(rng), t.y1 + jit(rng), t.x2 + jit(rng), t.y2 + jit(rng)};
      if (!(b.x1 < b.x2 && b.y1 < b.y2)) b = t;
    } else {
      const double x = pos(rng), y = pos(rng);
      b = {x, y, x + ext(rng), y + ext(rng)};
    }
    c.detections[im].push_back({b, cls(rng), scores[i]});
  }
  return c;
}

inline std::vector<autoprom::ApImage> to_ap_images(const ApCase& c) {
  std::vector<autoprom::ApImage> out;
  for (std::size_t i = 0; i < c.truth.size(); ++i) out.push_back({c.detections[i], c.truth[i]});
  return out;
}

// ------------------------------------------------------------- assignment

struct Assignment {
  std::size_t pairs = 0;
  double cost = 0;
};

/// Exhaustive search over one-to-one assignments using only pairs within the
/// radius: most pairs first, then least summed distance.
inline Assignment best_assignment(const std::vector<autoprom::Centroid>& pred,
                                  const std::vector<autoprom::Centroid>& truth, double radius) {
  Assignment best;
  std::vector<bool> used(truth.size(), false);
  std::function<void(std::size_t, std::size_t, double)> go = [&](std::size_t i, std::size_t pairs, double cost) {
    if (i == pred.size()) {
      if (pairs > best.pairs || (pairs == best.pairs && cost < best.cost)) best = {pairs, cost};
      return;
    }
    go(i + 1, pairs, cost);
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[j]) continue;
      const double d = std::sqrt((pred[i].row - truth[j].row) * (pred[i].row - truth[j].row) +
                                 (pred[i].col - truth[j].col) * (pred[i].col - truth[j].col));
      if (d > radius) continue;
      used[j] = true;
      go(i + 1, pairs + 1, cost + d);
      used[j] = false;
    }
  };
  go(0, 0, 0.0);
  return best;
}

inline std::vector<autoprom::Centroid> random_centroids(std::mt19937_64& rng, std::size_t n, int classes) {
  std::uniform_real_distribution<double> pos(0, 40);
  std::uniform_int_distribution<int> cls(1, classes);
  std::vector<autoprom::Centroid> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({pos(rng), pos(rng), cls(rng)});
  return out;
}

// ---------------------------------------------------------------------- PQ

struct PqReference {
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
  bool unique = true;  // no segment matched twice

  double value() const {
    const double den = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
    return den == 0 ? 1.0 : iou_sum / den;
  }
};

/// All-pairs pixel IoU; a pair matches iff IoU > 0.5.
inline PqReference pq_reference(const InstanceSegmentation& pred, const InstanceSegmentation& truth, int class_id) {
  auto members = [](const InstanceSegmentation& s, std::size_t id) {
    std::vector<std::size_t> px;
    for (std::size_t i = 0; i < s.ids.size(); ++i)
      if (s.ids[i] == static_cast<std::int32_t>(id)) px.push_back(i);
    return px;
  };
  std::vector<std::size_t> ps, ts;
  for (std::size_t i = 0; i < pred.instances.size(); ++i)
    if (class_id == 0 || pred.instances[i].class_id == class_id) ps.push_back(i + 1);
  for (std::size_t i = 0; i < truth.instances.size(); ++i)
    if (class_id == 0 || truth.instances[i].class_id == class_id) ts.push_back(i + 1);
  PqReference r;
  std::vector<int> p_hits(ps.size(), 0), t_hits(ts.size(), 0);
  for (std::size_t a = 0; a < ps.size(); ++a) {
    const auto pa = members(pred, ps[a]);
    for (std::size_t b = 0; b < ts.size(); ++b) {
      const auto tb = members(truth, ts[b]);
      std::vector<std::size_t> common;
      std::set_intersection(pa.begin(), pa.end(), tb.begin(), tb.end(), std::back_inserter(common));
      const std::size_t uni = pa.size() + tb.size() - common.size();
      if (uni == 0) continue;
      const double v = static_cast<double>(common.size()) / static_cast<double>(uni);
      if (v > 0.5) {
        ++r.tp;
        r.iou_sum += v;
        ++p_hits[a];
        ++t_hits[b];
      }
    }
  }
  for (int h : p_hits) {
    r.fp += h == 0;
    r.unique = r.unique && h <= 1;
  }
  for (int h : t_hits) {
    r.fn += h == 0;
    r.unique = r.unique && h <= 1;
  }
  return r;
}

/// Paints up to `max_objects` random ellipses (later ones on top) and drops
/// instances that ended up with no pixels.
inline InstanceSegmentation random_segmentation(std::mt19937_64& rng, std::size_t h, std::size_t w,
                                                std::size_t max_objects, int classes) {
  std::uniform_int_distribution<std::size_t> count(0, max_objects);
  std::uniform_real_distribution<double> cy(0, static_cast<double>(h)), cx(0, static_cast<double>(w)), rad(1.5, 6);
  std::uniform_int_distribution<int> cls(1, classes);
  const std::size_t n = count(rng);
  std::vector<std::int32_t> raw(h * w, 0);
  std::vector<int> raw_class;
  for (std::size_t k = 0; k < n; ++k) {
    const double y0 = cy(rng), x0 = cx(rng), ry = rad(rng), rx = rad(rng);
    raw_class.push_back(cls(rng));
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double u = (static_cast<double>(r) - y0) / ry, v = (static_cast<double>(c) - x0) / rx;
        if (u * u + v * v <= 1) raw[r * w + c] = static_cast<std::int32_t>(k + 1);
      }
  }
  std::map<std::int32_t, std::int32_t> remap;
  InstanceSegmentation s(h, w);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == 0) continue;
    auto it = remap.find(raw[i]);
    if (it == remap.end()) {
      it = remap.emplace(raw[i], static_cast<std::int32_t>(remap.size() + 1)).first;
      s.instances.push_back({raw_class[static_cast<std::size_t>(raw[i] - 1)], 1.0});
    }
    s.ids[i] = it->second;
  }
  return s;
}

/// A noisy copy of `truth`: instances shifted by up to two pixels, some
/// dropped, some relabelled, plus a few spurious ones.
inline InstanceSegmentation perturb(std::mt19937_64& rng, const InstanceSegmentation& truth, int classes) {
  std::uniform_int_distribution<int> shift(-2, 2), coin(0, 5), cls(1, classes);
  const std::size_t h = truth.height, w = truth.width;
  std::vector<std::int32_t> raw(h * w, 0);
  std::vector<int> raw_class;
  for (std::size_t k = 0; k < truth.instances.size(); ++k) {
    if (coin(rng) == 0) continue;
    const int dy = shift(rng), dx = shift(rng);
    raw_class.push_back(coin(rng) == 1 ? cls(rng) : truth.instances[k].class_id);
    const auto id = static_cast<std::int32_t>(raw_class.size());
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        if (truth.at(r, c) != static_cast<std::int32_t>(k + 1)) continue;
        const long rr = static_cast<long>(r) + dy, cc = static_cast<long>(c) + dx;
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
        raw[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)] = id;
      }
  }
  InstanceSegmentation extra = random_segmentation(rng, h, w, 2, classes);
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (raw[i] == 0 && extra.ids[i] > 0) raw[i] = static_cast<std::int32_t>(raw_class.size()) + extra.ids[i];
  for (const auto& e : extra.instances) raw_class.push_back(e.class_id);

  std::map<std::int32_t, std::int32_t> remap;
  InstanceSegmentation s(h, w);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == 0) continue;
    auto it = remap.find(raw[i]);
    if (it == remap.end()) {
      it = remap.emplace(raw[i], static_cast<std::int32_t>(remap.size() + 1)).first;
      s.instances.push_back({raw_class[static_cast<std::size_t>(raw[i] - 1)], 1.0});
    }
    s.ids[i] = it->second;
  }
  return s;
}

// ------------------------------------------------------------------ report

struct Tally {
  std::size_t cases = 0;
  std::size_t mismatches = 0;
  std::string first_failure;

  void record(bool ok, const std::string& what) {
    ++cases;
    if (!ok && mismatches++ == 0) first_failure = what;
  }
  bool ok() const { return cases > 0 && mismatches == 0; }
};

struct Battery {
  Tally nms, ap, pq, hungarian, dice;
  double dice_max_deviation = 0;
};

/// Library vs reference on freshly generated instances.
inline Battery run_battery(std::uint64_t seed, std::size_t nms_sets = 1000, std::size_t enumerated = 500,
                           std::size_t mask_pairs = 1000) {
  std::mt19937_64 rng(seed);
  Battery b;
  for (std::size_t i = 0; i < nms_sets; ++i) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 200)(rng);
    const auto dets = random_detections(rng, n, 3);
    const double thr = std::uniform_real_distribution<double>(0.2, 0.7)(rng);
    b.nms.record(autoprom::nms(dets, thr) == nms_reference(dets, thr), "nms set " + std::to_string(i));
  }
  for (std::size_t i = 0; i < enumerated; ++i) {
    const ApCase c = random_ap_case(rng, 10, 2);
    const auto imgs = to_ap_images(c);
    for (int cls = 0; cls <= 2; ++cls) {
      const auto got = autoprom::average_precision(imgs, 0.5, cls);
      const auto want = ap_reference(c, 0.5, cls);
      const bool ok = got.has_value() == want.has_value() && (!got || std::abs(*got - *want) < 1e-12);
      b.ap.record(ok, "ap case " + std::to_string(i) + " class " + std::to_string(cls));
    }
  }
  for (std::size_t i = 0; i < enumerated; ++i) {
    const auto truth = random_segmentation(rng, 24, 24, 7, 2);
    const auto pred = i % 4 == 0 ? random_segmentation(rng, 24, 24, 7, 2) : perturb(rng, truth, 2);
    for (int cls = 0; cls <= 2; ++cls) {
      const auto got = autoprom::pq_counts(pred, truth, cls);
      const auto want = pq_reference(pred, truth, cls);
      const bool ok = want.unique && got.tp == want.tp && got.fp == want.fp && got.fn == want.fn &&
                      std::abs(got.iou_sum - want.iou_sum) < 1e-12 && std::abs(got.value() - want.value()) < 1e-12;
      b.pq.record(ok, "pq case " + std::to_string(i) + " class " + std::to_string(cls));
    }
  }
  for (std::size_t i = 0; i < enumerated; ++i) {
    std::uniform_int_distribution<std::size_t> n(0, 7);
    const auto pred = random_centroids(rng, n(rng), 2), truth = random_centroids(rng, n(rng), 2);
    const double radius = std::uniform_real_distribution<double>(4, 16)(rng);
    const auto m = autoprom::match_centroids(pred, truth, radius);
    double cost = 0;
    bool within = true;
    for (const auto& [p, t] : m.pairs) {
      const double d = std::hypot(pred[p].row - truth[t].row, pred[p].col - truth[t].col);
      cost += d;
      within = within && d <= radius;
    }
    const Assignment want = best_assignment(pred, truth, radius);
    const bool ok = within && m.pairs.size() == want.pairs && std::abs(cost - want.cost) < 1e-9 &&
                    m.pairs.size() + m.unmatched_pred.size() == pred.size() &&
                    m.pairs.size() + m.unmatched_truth.size() == truth.size();
    b.hungarian.record(ok, "assignment case " + std::to_string(i));
  }
  for (std::size_t i = 0; i < mask_pairs; ++i) {
    const std::size_t size = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    const double pa = std::uniform_real_distribution<double>(0, 1)(rng), pb = std::uniform_real_distribution<double>(0, 1)(rng);
    std::bernoulli_distribution da(pa * pa), db(pb * pb);
    std::vector<std::uint8_t> a(size), c(size);
    for (std::size_t k = 0; k < size; ++k) {
      a[k] = da(rng);
      c[k] = db(rng);
    }
    const double iou = autoprom::mask_iou(a, c), d = autoprom::dice(a, c);
    const double dev = std::abs(d - 2 * iou / (1 + iou));
    b.dice_max_deviation = std::max(b.dice_max_deviation, dev);
    b.dice.record(dev <= 1e-9, "mask pair " + std::to_string(i));
  }
  return b;
}

}  // namespace oracle
