#pragma once

// Central finite-difference checks in double precision. Shared by the unit
// suite and the acceptance binary.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "autoprom/autoprom.hpp"

namespace gradcheck {

using autoprom::Shape;
using Tensor = autoprom::Tensor<double>;

inline constexpr double kStep = 1e-4;
inline constexpr double kTolerance = 1e-5;
// Below this magnitude errors are measured absolutely.
inline constexpr double kFloor = 1e-3;

struct Result {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // straddled a kink
  double max_error = 0;
  std::string worst;

  bool ok() const { return checked > 0 && max_error < kTolerance; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFloor});
}

/// Collects tensors to perturb together with where their analytic gradient
/// lands, then compares a sample of coordinates.
class Checker {
 public:
  Checker(std::string name, std::uint64_t seed) : rng_(seed) { result_.name = std::move(name); }

  void watch(std::string label, Tensor* value, const Tensor* grad) { watched_.push_back({std::move(label), value, grad}); }
  void watch(autoprom::Parameter<double>& p) { watch(p.name, &p.value, &p.grad); }

  /// `loss` must not record; `analytic` runs the recorded forward + backward.
  Result run(const std::function<double()>& loss, const std::function<void()>& analytic, std::size_t per_tensor = 10) {
    analytic();
    std::vector<Tensor> grads;
    for (const auto& w : watched_) grads.push_back(*w.grad);

    for (std::size_t t = 0; t < watched_.size(); ++t) {
      Tensor& v = *watched_[t].value;
      if (v.numel() == 0) continue;
      std::vector<std::size_t> idx;
      if (per_tensor >= v.numel()) {
        for (std::size_t i = 0; i < v.numel(); ++i) idx.push_back(i);
      } else {
        idx = {0, v.numel() - 1};
        std::uniform_int_distribution<std::size_t> pick(1, v.numel() - 2);
        while (idx.size() < per_tensor) idx.push_back(pick(rng_));
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
      }
      for (std::size_t i : idx) {
        const double saved = v[i];
        const std::uint64_t base = signature(loss);
        v[i] = saved + kStep;
        const std::uint64_t sig_plus = signature(loss);
        const double plus = last_;
        v[i] = saved - kStep;
        const std::uint64_t sig_minus = signature(loss);
        const double minus = last_;
        v[i] = saved;
        if (sig_plus != base || sig_minus != base) {
          ++result_.skipped;
          continue;
        }
        const double numeric = (plus - minus) / (2 * kStep);
        const double err = relative_error(grads[t][i], numeric);
        ++result_.checked;
        if (err > result_.max_error) {
          result_.max_error = err;
          result_.worst = watched_[t].label + "[" + std::to_string(i) + "] analytic " + std::to_string(grads[t][i]) +
                          " numeric " + std::to_string(numeric);
        }
      }
    }
    return result_;
  }

 private:
  struct Watched {
    std::string label;
    Tensor* value;
    const Tensor* grad;
  };

  std::uint64_t signature(const std::function<double()>& loss) {
    autoprom::kink::enabled = true;
    autoprom::kink::reset();
    last_ = loss();
    const std::uint64_t s = autoprom::kink::signature;
    autoprom::kink::enabled = false;
    return s;
  }

  std::mt19937_64 rng_;
  std::vector<Watched> watched_;
  Result result_;
  double last_ = 0;
};

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

/// sum(w * y): a generic scalar head whose upstream gradient is w.
inline double weighted(const Tensor& y, const Tensor& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
  return s;
}

inline constexpr autoprom::ForwardMode kProbeBatch{true, false};
inline constexpr autoprom::ForwardMode kProbeRunning{false, false};

// ------------------------------------------------------------------ configs

inline Result check_conv(std::mt19937_64& rng, int id) {
  std::uniform_int_distribution<std::size_t> ch(1, 3), kd(1, 4), sd(1, 2), md(1, 3), nd(1, 2);
  const std::size_t k = kd(rng), s = sd(rng);
  const std::size_t oh = md(rng), ow = md(rng);
  // Input extents chosen so the output is exact: in = (out - 1) * s + k - 2p >= 1.
  std::size_t p = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
  while (p > 0 && (std::min(oh, ow) - 1) * s + k < 2 * p + 1) --p;
  const std::size_t h = (oh - 1) * s + k - 2 * p;
  const std::size_t w = (ow - 1) * s + k - 2 * p;
  const autoprom::ConvGeometry g{k, s, p};
  const std::size_t n = nd(rng), ci = ch(rng), co = ch(rng);
  Tensor x = random_tensor({n, ci, h, w}, rng), wt = random_tensor({co, ci, k, k}, rng, 0.5),
         b = random_tensor({co}, rng);
  const Shape out = autoprom::conv2d_output_shape(x.shape(), wt.shape(), g);
  const Tensor up = random_tensor(out, rng);
  Tensor dx, dw(wt.shape()), db(b.shape());
  Checker c("conv2d#" + std::to_string(id) + " k" + std::to_string(k) + "s" + std::to_string(s) + "p" +
                std::to_string(p) + " " + autoprom::shape_str(x.shape()),
            rng());
  c.watch("x", &x, &dx);
  c.watch("w", &wt, &dw);
  c.watch("b", &b, &db);
  return c.run([&] { return weighted(autoprom::conv2d(x, wt, &b, g), up); },
               [&] {
                 dw.fill(0);
                 db.fill(0);
                 dx = autoprom::conv2d_backward(x, wt, up, g, &dw, &db, true);
               });
}

inline Result check_batchnorm(std::mt19937_64& rng, int id, bool batch_stats) {
  std::uniform_int_distribution<std::size_t> nd(2, 3), cd(1, 3), sd(2, 4);
  const Shape shape{nd(rng), cd(rng), sd(rng), sd(rng)};
  autoprom::BatchNorm2d<double> bn("bn", shape[1]);
  for (auto& v : bn.gamma().value.values()) v = 0.5 + std::abs(std::normal_distribution<double>()(rng));
  bn.beta().value = random_tensor({shape[1]}, rng);
  if (!batch_stats) {
    // Populate running statistics with one recorded pass on other data.
    bn.forward(random_tensor(shape, rng, 2.0), autoprom::kTraining);
    bn.clear_saved();
  }
  Tensor x = random_tensor(shape, rng, 1.5);
  const Tensor up = random_tensor(shape, rng);
  Tensor dx;
  const autoprom::ForwardMode probe = batch_stats ? kProbeBatch : kProbeRunning;
  const autoprom::ForwardMode rec{batch_stats, true};
  Checker c(std::string("batchnorm#") + std::to_string(id) + (batch_stats ? " batch" : " running") + " " +
                autoprom::shape_str(shape),
            rng());
  c.watch("x", &x, &dx);
  c.watch(bn.gamma());
  c.watch(bn.beta());
  return c.run([&] { return weighted(bn.forward(x, probe), up); },
               [&] {
                 bn.gamma().zero_grad();
                 bn.beta().zero_grad();
                 bn.forward(x, rec);
                 dx = bn.backward(up);
               });
}

inline Result check_relu(std::mt19937_64& rng, int id) {
  Tensor x = random_tensor({2, 2, 3, 3}, rng);
  const Tensor up = random_tensor(x.shape(), rng);
  autoprom::ReLU<double> r;
  Tensor dx;
  Checker c("relu#" + std::to_string(id), rng());
  c.watch("x", &x, &dx);
  return c.run([&] { return weighted(autoprom::relu(x), up); },
               [&] {
                 r.forward(x, autoprom::kTraining);
                 dx = r.backward(up);
               },
               x.numel());
}

inline Result check_resample(std::mt19937_64& rng, int id, std::size_t factor) {
  const std::size_t s = factor == 0 ? 3 : 4 * factor;
  Tensor x = random_tensor({2, 2, s, s}, rng);
  const Shape out = factor == 0 ? Shape{2, 2, 2 * s, 2 * s} : Shape{2, 2, s / factor, s / factor};
  const Tensor up = random_tensor(out, rng);
  Tensor dx;
  Checker c((factor == 0 ? "upsample2x#" : "subsample" + std::to_string(factor) + "#") + std::to_string(id), rng());
  c.watch("x", &x, &dx);
  auto fwd = [&] { return factor == 0 ? autoprom::upsample2x(x) : autoprom::subsample(x, factor); };
  return c.run([&] { return weighted(fwd(), up); },
               [&] {
                 dx = factor == 0 ? autoprom::upsample2x_backward(up)
                                  : autoprom::subsample_backward(up, x.shape(), factor);
               },
               x.numel());
}

inline Result check_convbn(std::mt19937_64& rng, int id) {
  const bool down = id % 2 == 1, with_relu = id % 3 != 2;
  const std::size_t ci = 2, co = 3;
  const auto spec = down ? autoprom::LayerSpec::downsample2x(ci, co) : autoprom::LayerSpec::conv2d(ci, co, 3, 1, 1);
  autoprom::ConvBn<double> layer("cb", spec, with_relu, rng);
  Tensor x = random_tensor({2, ci, 4, 4}, rng);
  const Tensor up = random_tensor(layer.output_shape(x.shape()), rng);
  Tensor dx;
  Checker c("convbn#" + std::to_string(id) + (down ? " down" : " same") + (with_relu ? " relu" : ""), rng());
  c.watch("x", &x, &dx);
  c.watch(layer.conv().weight());
  c.watch(layer.conv().bias());
  c.watch(layer.bn().gamma());
  c.watch(layer.bn().beta());
  auto zero = [&] {
    for (auto* p : {&layer.conv().weight(), &layer.conv().bias(), &layer.bn().gamma(), &layer.bn().beta()})
      p->zero_grad();
  };
  return c.run([&] { return weighted(layer.forward(x, kProbeBatch), up); },
               [&] {
                 zero();
                 layer.forward(x, autoprom::kTraining);
                 dx = layer.backward(up);
               });
}

inline Result check_projection(std::mt19937_64& rng, int id) {
  const int which = id % 4 + 1;
  autoprom::DecoderConfig cfg;
  cfg.channels = 3;
  cfg.in_channels = 2;
  cfg.base_size = 16;
  cfg.fuse = id % 2 == 0 ? autoprom::FuseMode::kConcat : autoprom::FuseMode::kSum;
  autoprom::ProjectionLayer<double> p(which, cfg, rng);
  const std::size_t s = 8;
  std::array<Tensor, 3> block{random_tensor({2, 2, s, s}, rng), random_tensor({2, 2, s, s}, rng),
                              random_tensor({2, 2, s, s}, rng)};
  const Shape out = p.output_shape(block[0].shape());
  const bool with_carry = id % 3 == 0;
  Tensor carry = random_tensor(out, rng);
  Tensor dcarry;
  const Tensor up = random_tensor(out, rng);
  std::vector<autoprom::Parameter<double>*> params;
  p.visit({[&](autoprom::Parameter<double>& q) { params.push_back(&q); }, [](autoprom::Buffer<double>) {}});
  Checker c("projection#" + std::to_string(id) + " p" + std::to_string(which) +
                (cfg.fuse == autoprom::FuseMode::kConcat ? " concat" : " sum") + (with_carry ? " carry" : ""),
            rng());
  for (auto* q : params)
    if (q->trainable) c.watch(*q);
  if (with_carry) c.watch("carry", &carry, &dcarry);
  return c.run([&] { return weighted(p.forward(block, with_carry ? &carry : nullptr, kProbeBatch), up); },
               [&] {
                 for (auto* q : params) q->zero_grad();
                 p.forward(block, with_carry ? &carry : nullptr, autoprom::kTraining);
                 p.backward(up);
                 dcarry = up;
               },
               6);
}

inline Result check_subnet(std::mt19937_64& rng, int id) {
  autoprom::Subnet<double> net("sub", 3, static_cast<std::size_t>(id % 2 + 1), 4, rng);
  Tensor x = random_tensor({2, 3, 3, 3}, rng);
  const Tensor up = random_tensor({2, 4, 3, 3}, rng);
  Tensor dx;
  std::vector<autoprom::Parameter<double>*> params;
  net.visit({[&](autoprom::Parameter<double>& q) { params.push_back(&q); }, [](autoprom::Buffer<double>) {}});
  Checker c("subnet#" + std::to_string(id), rng());
  c.watch("x", &x, &dx);
  for (auto* q : params) c.watch(*q);
  return c.run([&] { return weighted(net.forward(x, kProbeBatch), up); },
               [&] {
                 for (auto* q : params) q->zero_grad();
                 net.forward(x, autoprom::kTraining);
                 dx = net.backward(up);
               },
               6);
}

/// Random logits against random targets (foreground, background, ignored).
inline autoprom::BoxTargets random_targets(std::mt19937_64& rng, std::size_t anchors, int k) {
  autoprom::BoxTargets t;
  std::uniform_int_distribution<int> lab(-1, k);
  std::normal_distribution<double> n(0, 0.5);
  for (std::size_t a = 0; a < anchors; ++a) {
    t.labels.push_back(lab(rng));
    t.deltas.push_back({n(rng), n(rng), n(rng), n(rng)});
    t.matched_gt.push_back(t.labels.back() > 0 ? 0 : -1);
    t.num_foreground += t.labels.back() > 0;
  }
  return t;
}

inline Result check_focal(std::mt19937_64& rng, int id) {
  const int k = id % 2 + 1;
  const std::size_t anchors = 12;
  const autoprom::BoxTargets targets = random_targets(rng, anchors, k);
  autoprom::FocalOptions opt;
  if (id % 3 == 1) opt.gamma = 0.0;
  if (id % 3 == 2) {
    opt.gamma = 1.5;
    opt.alpha = 0.25;
  }
  Tensor x = random_tensor({anchors * static_cast<std::size_t>(k)}, rng, 3.0);
  Tensor dx(x.shape());
  Checker c("focal#" + std::to_string(id) + " gamma " + std::to_string(opt.gamma), rng());
  c.watch("logits", &x, &dx);
  return c.run([&] { return autoprom::focal_loss<double>(x.values(), targets, static_cast<std::size_t>(k), opt); },
               [&] {
                 dx.fill(0);
                 autoprom::focal_loss<double>(x.values(), targets, static_cast<std::size_t>(k), opt, dx.data(), 1.0);
               },
               x.numel());
}

inline Result check_box_loss(std::mt19937_64& rng, int id) {
  const std::size_t anchors = 10;
  const autoprom::BoxTargets targets = random_targets(rng, anchors, 2);
  Tensor x = random_tensor({anchors * 4}, rng, 0.5);
  Tensor dx(x.shape());
  Checker c("smooth_l1#" + std::to_string(id), rng());
  c.watch("deltas", &x, &dx);
  return c.run([&] { return autoprom::box_loss<double>(x.values(), targets); },
               [&] {
                 dx.fill(0);
                 autoprom::box_loss<double>(x.values(), targets, dx.data(), 1.0);
               },
               x.numel());
}

/// Small detector config: 64 px images, patch 4 -> 16x16 grid.
inline autoprom::DetectorConfig tiny_detector(std::size_t channels, std::size_t depth, autoprom::SkipMode skip,
                                              autoprom::FuseMode fuse) {
  autoprom::DetectorConfig cfg;
  cfg.encoder.image_size = 64;
  cfg.encoder.patch_size = 4;
  cfg.encoder.embed_dim = 2;
  cfg.decoder.channels = channels;
  cfg.decoder.skip = skip;
  cfg.decoder.fuse = fuse;
  cfg.head_depth = depth;
  cfg.num_classes = 2;
  return cfg;
}

/// Decoder + head + focal/smooth-L1 loss, gradients w.r.t. every trainable tensor.
inline Result check_composed(std::mt19937_64& rng, int id) {
  static const autoprom::SkipMode skips[] = {autoprom::SkipMode::kChain, autoprom::SkipMode::kDirect,
                                             autoprom::SkipMode::kNone};
  const auto cfg = tiny_detector(2, static_cast<std::size_t>(id % 2 + 1), skips[id % 3],
                                 id % 2 ? autoprom::FuseMode::kSum : autoprom::FuseMode::kConcat);
  autoprom::Detector<double> model(cfg, rng());
  const std::size_t n = 2, s = cfg.encoder.grid_size();
  autoprom::EncoderBlocks<double> blocks;
  for (auto& b : blocks)
    for (auto& m : b) m = random_tensor({n, cfg.encoder.embed_dim, s, s}, rng);
  // Targets from random boxes so that matching produces real foreground.
  std::vector<autoprom::BoxTargets> targets;
  std::uniform_real_distribution<double> pos(4, 50), ext(8, 24);
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<autoprom::GroundTruthBox> gt;
    for (int g = 0; g < 3; ++g) {
      const double x = pos(rng), y = pos(rng);
      gt.push_back({{x, y, x + ext(rng), y + ext(rng)}, g % 2 + 1});
    }
    targets.push_back(autoprom::match_anchors(model.anchors().boxes, gt));
  }
  const autoprom::FocalOptions focal;
  auto params = model.parameters();
  Checker c("decoder+head#" + std::to_string(id), rng());
  for (auto* p : params) c.watch(*p);
  return c.run(
      [&] {
        const auto out = model.forward(blocks, kProbeBatch);
        return model.loss(out, targets, focal, nullptr).total();
      },
      [&] {
        for (auto* p : params) p->zero_grad();
        autoprom::HeadOutput<double> grad;
        const auto out = model.forward(blocks, autoprom::kTraining);
        model.loss(out, targets, focal, &grad);
        model.backward(grad);
      },
      3);
}

/// The full battery: at least 50 random configurations.
inline std::vector<Result> run_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Result> out;
  for (int i = 0; i < 14; ++i) out.push_back(check_conv(rng, i));
  for (int i = 0; i < 5; ++i) out.push_back(check_batchnorm(rng, i, true));
  for (int i = 0; i < 3; ++i) out.push_back(check_batchnorm(rng, i, false));
  for (int i = 0; i < 2; ++i) out.push_back(check_relu(rng, i));
  out.push_back(check_resample(rng, 0, 0));
  out.push_back(check_resample(rng, 1, 2));
  out.push_back(check_resample(rng, 2, 8));
  for (int i = 0; i < 4; ++i) out.push_back(check_convbn(rng, i));
  for (int i = 0; i < 8; ++i) out.push_back(check_projection(rng, i));
  for (int i = 0; i < 2; ++i) out.push_back(check_subnet(rng, i));
  for (int i = 0; i < 6; ++i) out.push_back(check_focal(rng, i));
  for (int i = 0; i < 3; ++i) out.push_back(check_box_loss(rng, i));
  for (int i = 0; i < 4; ++i) out.push_back(check_composed(rng, i));
  return out;
}

}  // namespace gradcheck
