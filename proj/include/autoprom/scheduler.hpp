#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>

#include <nlohmann/json.hpp>

#include "autoprom/error.hpp"

namespace autoprom {

struct PlateauOptions {
  double factor = 0.1;
  std::size_t patience = 5;
  double threshold = 1e-4;  // relative improvement needed
  double floor = 3e-7;
};

inline void to_json(nlohmann::json& j, const PlateauOptions& o) {
  j = {{"factor", o.factor}, {"patience", o.patience}, {"threshold", o.threshold}, {"floor", o.floor}};
}

inline void from_json(const nlohmann::json& j, PlateauOptions& o) {
  o.factor = j.value("factor", o.factor);
  o.patience = j.value("patience", o.patience);
  o.threshold = j.value("threshold", o.threshold);
  o.floor = j.value("floor", o.floor);
}

/// Reduce-on-plateau on a minimised metric: after `patience` consecutive
/// epochs without relative improvement the rate is multiplied by `factor`,
/// never going below `floor`.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, PlateauOptions options) : lr_(initial_lr), options_(options) {
    if (!(options_.factor > 0 && options_.factor < 1)) throw ValidationError("scheduler: factor must lie in (0, 1)");
    if (options_.patience == 0) throw ValidationError("scheduler: patience must be >= 1");
    if (!(options_.floor > 0) || options_.floor > initial_lr)
      throw ValidationError("scheduler: need 0 < floor <= initial learning rate");
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_; }

  /// Call once per epoch with the monitored value. Returns true when the
  /// rate was reduced.
  bool step(double metric) {
    if (metric < best_ * (1.0 - options_.threshold) || best_ == std::numeric_limits<double>::infinity()) {
      best_ = metric;
      bad_ = 0;
      return false;
    }
    if (++bad_ < options_.patience) return false;
    bad_ = 0;
    double next = lr_ * options_.factor;
    // 3e-4 * 0.1^3 lands a rounding step above 3e-7; treat that as the floor.
    if (next < options_.floor * (1.0 + 1e-9)) next = options_.floor;
    if (next >= lr_) return false;
    lr_ = next;
    return true;
  }

 private:
  double lr_;
  PlateauOptions options_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

}  // namespace autoprom
