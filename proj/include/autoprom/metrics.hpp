#pragma once

// Evaluation: mask IoU and dice, AP at a fixed IoU threshold, centroid
// matched precision/recall/F1, panoptic quality, the confusion matrix and a
// dataset-level accumulator producing MetricsReport.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/boxes.hpp"
#include "autoprom/data.hpp"
#include "autoprom/error.hpp"
#include "autoprom/hungarian.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/postprocess.hpp"
#include "autoprom/segmentation.hpp"

namespace autoprom {

// ------------------------------------------------------------ mask overlap

struct MaskOverlap {
  std::size_t a = 0, b = 0, intersection = 0;
};

inline MaskOverlap mask_overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ShapeError("mask overlap: masks differ in size");
  MaskOverlap o;
  for (std::size_t i = 0; i < a.size(); ++i) {
    o.a += a[i] != 0;
    o.b += b[i] != 0;
    o.intersection += (a[i] != 0) && (b[i] != 0);
  }
  return o;
}

/// |A n B| / |A u B|; two empty masks agree perfectly (1), as in dice().
inline double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  const MaskOverlap o = mask_overlap(a, b);
  const std::size_t uni = o.a + o.b - o.intersection;
  return uni == 0 ? 1.0 : static_cast<double>(o.intersection) / static_cast<double>(uni);
}

/// 2|A n B| / (|A| + |B|); both empty -> 1.
inline double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  const MaskOverlap o = mask_overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.intersection) / static_cast<double>(o.a + o.b);
}

// ------------------------------------------------------------ P / R / F1

inline double safe_ratio(double num, double den) { return den == 0 ? 0.0 : num / den; }

struct PrfScores {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision() const { return safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp)); }
  double recall() const { return safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fn)); }
  double f1() const {
    const double p = precision(), r = recall();
    return safe_ratio(2.0 * p * r, p + r);
  }
  PrfScores& operator+=(const PrfScores& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

// ---------------------------------------------------------- average precision

struct ApImage {
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> truth;
};

/// Area under the precision envelope given cumulative (recall, precision)
/// points in detection order.
inline double ap_from_curve(std::span<const double> recall, std::span<const double> precision) {
  std::vector<double> env(precision.begin(), precision.end());
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * env[i];
    prev_r = recall[i];
  }
  return ap;
}

/// AP at an IoU threshold. class_id == 0 ignores classes; otherwise only
/// detections and GT of that class take part. Within an image detections are
/// matched in descending score order to the unmatched GT of highest IoU.
/// Across images, equal scores keep (image, rank) order. No GT -> nullopt.
inline std::optional<double> average_precision(std::span<const ApImage> images, double iou_threshold = 0.5,
                                               int class_id = 0) {
  struct Scored {
    double score;
    std::size_t image, rank;
    bool tp;
  };
  std::vector<Scored> all;
  std::size_t total_gt = 0;
  for (std::size_t im = 0; im < images.size(); ++im) {
    std::vector<Box> gt;
    for (const auto& g : images[im].truth)
      if (class_id == 0 || g.class_id == class_id) gt.push_back(g.box);
    total_gt += gt.size();
    std::vector<const Detection*> dets;
    for (const auto& d : images[im].detections)
      if (class_id == 0 || d.class_id == class_id) dets.push_back(&d);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
    std::vector<char> taken(gt.size(), 0);
    for (std::size_t r = 0; r < dets.size(); ++r) {
      double best = -1.0;
      std::size_t arg = gt.size();
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (taken[g]) continue;
        const double v = iou(dets[r]->box, gt[g]);
        if (v > best) {
          best = v;
          arg = g;
        }
      }
      const bool tp = arg < gt.size() && best >= iou_threshold;
      if (tp) taken[arg] = 1;
      all.push_back({dets[r]->score, im, r, tp});
    }
  }
  if (total_gt == 0) return std::nullopt;
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    tp += all[i].tp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  return ap_from_curve(recall, precision);
}

/// Mean of per-class AP over classes that have GT.
inline std::optional<double> mean_average_precision(std::span<const ApImage> images, int num_classes,
                                                    double iou_threshold = 0.5) {
  double sum = 0.0;
  int count = 0;
  for (int k = 1; k <= num_classes; ++k)
    if (const auto ap = average_precision(images, iou_threshold, k)) {
      sum += *ap;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / count;
}

// ---------------------------------------------------------- centroid matching

struct Centroid {
  double row = 0, col = 0;
  int class_id = 1;
};

struct CentroidMatching {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, truth)
  std::vector<std::size_t> unmatched_pred;
  std::vector<std::size_t> unmatched_truth;
};

/// One-to-one assignment maximising the number of pairs within `radius`,
/// then minimising their summed distance.
inline CentroidMatching match_centroids(std::span<const Centroid> pred, std::span<const Centroid> truth,
                                        double radius = 12.0) {
  const std::size_t np = pred.size(), nt = truth.size();
  std::vector<double> cost(np * nt);
  // Any forbidden pair costs more than every allowed assignment combined.
  const double forbidden = (static_cast<double>(std::min(np, nt)) + 1.0) * (radius + 1.0);
  std::vector<char> allowed(np * nt, 0);
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t j = 0; j < nt; ++j) {
      const double d = std::hypot(pred[i].row - truth[j].row, pred[i].col - truth[j].col);
      allowed[i * nt + j] = d <= radius;
      cost[i * nt + j] = d <= radius ? d : forbidden;
    }
  const std::vector<int> assign = hungarian(cost, np, nt);
  CentroidMatching m;
  std::vector<char> truth_used(nt, 0);
  for (std::size_t i = 0; i < np; ++i) {
    const int j = assign[i];
    if (j >= 0 && allowed[i * nt + static_cast<std::size_t>(j)]) {
      m.pairs.emplace_back(i, static_cast<std::size_t>(j));
      truth_used[static_cast<std::size_t>(j)] = 1;
    } else {
      m.unmatched_pred.push_back(i);
    }
  }
  for (std::size_t j = 0; j < nt; ++j)
    if (!truth_used[j]) m.unmatched_truth.push_back(j);
  return m;
}

/// Per-class scores from a matching: a pair counts as TP for class c when
/// both sides are c; a pair whose classes disagree is an FP for the
/// predicted class and an FN for the true class.
inline PrfScores class_scores(const CentroidMatching& m, std::span<const Centroid> pred,
                              std::span<const Centroid> truth, int class_id) {
  PrfScores s;
  for (const auto& [p, t] : m.pairs) {
    const bool pc = pred[p].class_id == class_id, tc = truth[t].class_id == class_id;
    if (pc && tc) ++s.tp;
    else if (pc) ++s.fp;
    else if (tc) ++s.fn;
  }
  for (std::size_t p : m.unmatched_pred) s.fp += pred[p].class_id == class_id;
  for (std::size_t t : m.unmatched_truth) s.fn += truth[t].class_id == class_id;
  return s;
}

/// (K+1) x (K+1), rows = true class, columns = predicted class, index 0 =
/// background (unmatched).
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

inline ConfusionMatrix confusion_matrix(const CentroidMatching& m, std::span<const Centroid> pred,
                                        std::span<const Centroid> truth, int num_classes) {
  const auto k = static_cast<std::size_t>(num_classes) + 1;
  ConfusionMatrix cm(k, std::vector<std::size_t>(k, 0));
  auto idx = [&](int c) {
    if (c < 1 || c > num_classes) throw ValidationError("confusion matrix: class id " + std::to_string(c) + " out of range");
    return static_cast<std::size_t>(c);
  };
  for (const auto& [p, t] : m.pairs) ++cm[idx(truth[t].class_id)][idx(pred[p].class_id)];
  for (std::size_t p : m.unmatched_pred) ++cm[0][idx(pred[p].class_id)];
  for (std::size_t t : m.unmatched_truth) ++cm[idx(truth[t].class_id)][0];
  return cm;
}

inline std::vector<Centroid> centroids_of(const std::vector<InstanceSummary>& s) {
  std::vector<Centroid> out;
  for (const auto& i : s) out.push_back({i.centroid_row, i.centroid_col, i.class_id});
  return out;
}

/// Box centre in pixel-index coordinates (the centre of pixel (r, c) is (r + 0.5, c + 0.5)).
inline std::vector<Centroid> centroids_of(const std::vector<Detection>& dets) {
  std::vector<Centroid> out;
  for (const auto& d : dets) out.push_back({d.box.cy() - 0.5, d.box.cx() - 0.5, d.class_id});
  return out;
}

// ---------------------------------------------------------- panoptic quality

struct PqCounts {
  double iou_sum = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  // Matched IoUs in units of 2^-52. Integer sums do not depend on the order
  // in which images or partial evaluators are combined; iou_sum mirrors it.
  unsigned __int128 iou_fixed = 0;

  static constexpr double kScale = 4503599627370496.0;  // 2^52

  void add_iou(double v) {
    iou_fixed += static_cast<unsigned __int128>(std::llround(v * kScale));
    iou_sum = static_cast<double>(iou_fixed) / kScale;
  }

  /// sum IoU / (TP + FP/2 + FN/2); nothing on either side -> 1.
  double value() const {
    const double den = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
    return den == 0 ? 1.0 : iou_sum / den;
  }
  PqCounts& operator+=(const PqCounts& o) {
    iou_fixed += o.iou_fixed;
    iou_sum = static_cast<double>(iou_fixed) / kScale;
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

/// Segments matched iff IoU > 0.5. class_id == 0 uses every instance
/// regardless of class.
inline PqCounts pq_counts(const InstanceSegmentation& pred, const InstanceSegmentation& truth, int class_id = 0) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw ShapeError("panoptic quality: prediction and truth differ in size");
  const std::size_t np = pred.instances.size(), nt = truth.instances.size();
  auto keep_p = [&](std::int32_t id) {
    return id > 0 && (class_id == 0 || pred.instances[static_cast<std::size_t>(id - 1)].class_id == class_id);
  };
  auto keep_t = [&](std::int32_t id) {
    return id > 0 && (class_id == 0 || truth.instances[static_cast<std::size_t>(id - 1)].class_id == class_id);
  };
  std::vector<std::size_t> area_p(np + 1, 0), area_t(nt + 1, 0);
  std::unordered_map<std::uint64_t, std::size_t> inter;
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const std::int32_t p = pred.ids[i], t = truth.ids[i];
    ++area_p[static_cast<std::size_t>(p)];
    ++area_t[static_cast<std::size_t>(t)];
    if (keep_p(p) && keep_t(t)) ++inter[static_cast<std::uint64_t>(t) * (np + 1) + static_cast<std::uint64_t>(p)];
  }
  std::vector<std::pair<std::uint64_t, double>> matched;
  std::vector<char> p_matched(np + 1, 0), t_matched(nt + 1, 0);
  for (const auto& [key, n] : inter) {
    const std::size_t t = key / (np + 1), p = key % (np + 1);
    const double v = static_cast<double>(n) / static_cast<double>(area_p[p] + area_t[t] - n);
    if (v > 0.5) {
      matched.emplace_back(key, v);
      p_matched[p] = 1;
      t_matched[t] = 1;
    }
  }
  PqCounts c;
  for (const auto& m : matched) c.add_iou(m.second);
  c.tp = matched.size();
  for (std::size_t p = 1; p <= np; ++p)
    if (keep_p(static_cast<std::int32_t>(p)) && !p_matched[p]) ++c.fp;
  for (std::size_t t = 1; t <= nt; ++t)
    if (keep_t(static_cast<std::int32_t>(t)) && !t_matched[t]) ++c.fn;
  return c;
}

enum class PqMode { kBinary, kMulticlass };

/// Single-image PQ. Multiclass averages classes present in the truth; with
/// no truth instances the result is 1 when the prediction is empty, else 0.
inline double panoptic_quality(const InstanceSegmentation& pred, const InstanceSegmentation& truth, PqMode mode,
                               int num_classes = 1) {
  if (mode == PqMode::kBinary) return pq_counts(pred, truth, 0).value();
  double sum = 0.0;
  int present = 0;
  for (int k = 1; k <= num_classes; ++k) {
    const bool in_truth = std::any_of(truth.instances.begin(), truth.instances.end(),
                                      [&](const InstanceInfo& i) { return i.class_id == k; });
    if (!in_truth) continue;
    sum += pq_counts(pred, truth, k).value();
    ++present;
  }
  if (present == 0) return pred.instances.empty() ? 1.0 : 0.0;
  return sum / present;
}

inline std::vector<std::uint8_t> foreground(const InstanceSegmentation& s) {
  std::vector<std::uint8_t> m(s.ids.size());
  for (std::size_t i = 0; i < s.ids.size(); ++i) m[i] = s.ids[i] > 0;
  return m;
}

// ---------------------------------------------------------------- report

enum class EvalMode { kBbox, kPq, kFull };
enum class PqAggregation { kDataset, kPerImage };

NLOHMANN_JSON_SERIALIZE_ENUM(EvalMode, {{EvalMode::kBbox, "bbox"}, {EvalMode::kPq, "pq"}, {EvalMode::kFull, "full"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PqAggregation,
                             {{PqAggregation::kDataset, "dataset"}, {PqAggregation::kPerImage, "per_image"}})

struct EvalOptions {
  double match_radius = 12.0;
  double ap_iou = 0.5;
  PqAggregation pq_aggregation = PqAggregation::kDataset;
};

struct ClassReport {
  int class_id = 0;
  std::string name;
  std::size_t truth_count = 0;
  PrfScores counts;
  bool present = false;  // class occurs in the truth
  std::optional<double> precision, recall, f1, pq, ap;
};

struct MetricsReport {
  int num_classes = 0;
  std::size_t images = 0;
  std::optional<double> ap;   // class-agnostic
  std::optional<double> map;  // per-class averaged
  std::optional<double> bpq, mpq, dice;
  PrfScores detection;  // centroid matching, classes ignored
  std::vector<ClassReport> per_class;
  ConfusionMatrix confusion;
  EvalOptions options;
};

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json_value(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"class", c.class_id}, {"name", c.name}, {"present", c.present},
                         {"truth_count", c.truth_count}, {"tp", c.counts.tp}, {"fp", c.counts.fp},
                         {"fn", c.counts.fn}, {"precision", opt_json(c.precision)}, {"recall", opt_json(c.recall)},
                         {"f1", opt_json(c.f1)}, {"pq", opt_json(c.pq)}, {"ap", opt_json(c.ap)}});
  return {{"num_classes", r.num_classes},
          {"images", r.images},
          {"ap", opt_json(r.ap)},
          {"map", opt_json(r.map)},
          {"bpq", opt_json(r.bpq)},
          {"mpq", opt_json(r.mpq)},
          {"dice", opt_json(r.dice)},
          {"detection",
           {{"tp", r.detection.tp}, {"fp", r.detection.fp}, {"fn", r.detection.fn},
            {"precision", r.detection.precision()}, {"recall", r.detection.recall()}, {"f1", r.detection.f1()}}},
          {"per_class", per_class},
          {"confusion", r.confusion},
          {"options",
           {{"match_radius", r.options.match_radius}, {"ap_iou", r.options.ap_iou},
            {"pq_aggregation", r.options.pq_aggregation}}}};
}

inline std::string confusion_csv(const MetricsReport& r) {
  std::string out = "truth\\pred,background";
  for (int k = 1; k <= r.num_classes; ++k)
    out += "," + (static_cast<std::size_t>(k - 1) < r.per_class.size() ? r.per_class[static_cast<std::size_t>(k - 1)].name
                                                                      : "class" + std::to_string(k));
  out += "\n";
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    out += i == 0 ? "background" : r.per_class[i - 1].name;
    for (std::size_t v : r.confusion[i]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

inline void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                         const MetricsReport& r) {
  std::ofstream js(json_path);
  js << to_json_value(r).dump(2) << '\n';
  if (!js) throw RuntimeAbort("cannot write " + json_path.string());
  std::ofstream cs(csv_path);
  cs << confusion_csv(r);
  if (!cs) throw RuntimeAbort("cannot write " + csv_path.string());
}

struct ImagePrediction {
  std::vector<Detection> detections;
  std::optional<InstanceSegmentation> segmentation;
};

/// Dataset accumulator. add() per image (in any grouping), merge() partial
/// evaluators, report() at the end.
class Evaluator {
 public:
  explicit Evaluator(int num_classes, EvalOptions options = {}, std::vector<std::string> names = {})
      : k_(num_classes), options_(options), names_(std::move(names)) {
    if (k_ < 1) throw ValidationError("evaluator: need at least one class");
    for (int c = static_cast<int>(names_.size()); c < k_; ++c) names_.push_back("class" + std::to_string(c + 1));
    class_counts_.assign(static_cast<std::size_t>(k_), {});
    class_pq_.assign(static_cast<std::size_t>(k_), {});
    truth_counts_.assign(static_cast<std::size_t>(k_), 0);
    confusion_.assign(static_cast<std::size_t>(k_) + 1, std::vector<std::size_t>(static_cast<std::size_t>(k_) + 1, 0));
  }

  void add(const Sample& truth, const ImagePrediction& pred) {
    ++images_;
    ap_images_.push_back({pred.detections, truth.boxes()});
    for (const auto& inst : truth.instances) ++truth_counts_.at(static_cast<std::size_t>(inst.class_id - 1));

    const std::vector<Centroid> tc = centroids_of(truth.instances);
    const std::vector<Centroid> pc =
        pred.segmentation ? centroids_of(summarize(*pred.segmentation)) : centroids_of(pred.detections);
    const CentroidMatching m = match_centroids(pc, tc, options_.match_radius);
    detection_ += PrfScores{m.pairs.size(), m.unmatched_pred.size(), m.unmatched_truth.size()};
    for (int k = 1; k <= k_; ++k) class_counts_[static_cast<std::size_t>(k - 1)] += class_scores(m, pc, tc, k);
    const ConfusionMatrix cm = confusion_matrix(m, pc, tc, k_);
    for (std::size_t i = 0; i < cm.size(); ++i)
      for (std::size_t j = 0; j < cm.size(); ++j) confusion_[i][j] += cm[i][j];

    if (pred.segmentation) {
      has_masks_ = true;
      const InstanceSegmentation& ps = *pred.segmentation;
      const PqCounts b = pq_counts(ps, truth.truth, 0);
      binary_pq_ += b;
      image_bpq_.push_back(b.value());
      bool any_class = false;
      double msum = 0.0;
      int mcount = 0;
      for (int k = 1; k <= k_; ++k) {
        const PqCounts c = pq_counts(ps, truth.truth, k);
        class_pq_[static_cast<std::size_t>(k - 1)] += c;
        if (c.tp + c.fn > 0) {
          msum += c.value();
          ++mcount;
          any_class = true;
        }
      }
      if (any_class) image_mpq_.push_back(msum / mcount);
      const auto fp = foreground(ps), ft = foreground(truth.truth);
      const MaskOverlap o = mask_overlap(fp, ft);
      dice_inter_ += o.intersection;
      dice_total_ += o.a + o.b;
    }
  }

  void merge(const Evaluator& o) {
    if (o.k_ != k_) throw ValidationError("evaluator merge: class counts differ");
    images_ += o.images_;
    ap_images_.insert(ap_images_.end(), o.ap_images_.begin(), o.ap_images_.end());
    detection_ += o.detection_;
    for (std::size_t i = 0; i < class_counts_.size(); ++i) {
      class_counts_[i] += o.class_counts_[i];
      class_pq_[i] += o.class_pq_[i];
      truth_counts_[i] += o.truth_counts_[i];
    }
    for (std::size_t i = 0; i < confusion_.size(); ++i)
      for (std::size_t j = 0; j < confusion_.size(); ++j) confusion_[i][j] += o.confusion_[i][j];
    has_masks_ = has_masks_ || o.has_masks_;
    binary_pq_ += o.binary_pq_;
    image_bpq_.insert(image_bpq_.end(), o.image_bpq_.begin(), o.image_bpq_.end());
    image_mpq_.insert(image_mpq_.end(), o.image_mpq_.begin(), o.image_mpq_.end());
    dice_inter_ += o.dice_inter_;
    dice_total_ += o.dice_total_;
  }

  MetricsReport report(EvalMode mode = EvalMode::kFull) const {
    MetricsReport r;
    r.num_classes = k_;
    r.images = images_;
    r.options = options_;
    const bool boxes = mode != EvalMode::kPq, masks = mode != EvalMode::kBbox && has_masks_;
    if (boxes) {
      r.ap = average_precision(ap_images_, options_.ap_iou, 0);
      r.map = mean_average_precision(ap_images_, k_, options_.ap_iou);
    }
    r.detection = detection_;
    r.confusion = confusion_;
    for (int k = 1; k <= k_; ++k) {
      const auto i = static_cast<std::size_t>(k - 1);
      ClassReport c;
      c.class_id = k;
      c.name = names_[i];
      c.truth_count = truth_counts_[i];
      c.counts = class_counts_[i];
      c.present = truth_counts_[i] > 0;
      if (c.present) {
        c.precision = c.counts.precision();
        c.recall = c.counts.recall();
        c.f1 = c.counts.f1();
        if (masks) c.pq = class_pq_[i].value();
        if (boxes) c.ap = average_precision(ap_images_, options_.ap_iou, k);
      }
      r.per_class.push_back(std::move(c));
    }
    if (masks) {
      if (options_.pq_aggregation == PqAggregation::kDataset) {
        r.bpq = binary_pq_.value();
        double sum = 0.0;
        int n = 0;
        for (const auto& c : r.per_class)
          if (c.pq) {
            sum += *c.pq;
            ++n;
          }
        r.mpq = n > 0 ? sum / n : (binary_pq_.fp == 0 ? 1.0 : 0.0);
      } else {
        r.bpq = mean(image_bpq_);
        r.mpq = image_mpq_.empty() ? (binary_pq_.fp == 0 ? 1.0 : 0.0) : mean(image_mpq_);
      }
      r.dice = dice_total_ == 0 ? 1.0 : 2.0 * static_cast<double>(dice_inter_) / static_cast<double>(dice_total_);
    }
    return r;
  }

 private:
  // Sorted first so the sum does not depend on the order images arrived in.
  static double mean(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? 1.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }

  int k_;
  EvalOptions options_;
  std::vector<std::string> names_;
  std::size_t images_ = 0;
  std::vector<ApImage> ap_images_;
  PrfScores detection_;
  std::vector<PrfScores> class_counts_;
  std::vector<PqCounts> class_pq_;
  std::vector<std::size_t> truth_counts_;
  ConfusionMatrix confusion_;
  bool has_masks_ = false;
  PqCounts binary_pq_;
  std::vector<double> image_bpq_, image_mpq_;
  std::size_t dice_inter_ = 0, dice_total_ = 0;
};

}  // namespace autoprom
