#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autoprom/error.hpp"
#include "autoprom/parameter.hpp"

namespace autoprom {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Frozen parameters are skipped entirely.
template <typename T>
class Adam {
 public:
  Adam(ParameterRefs<T> params, AdamOptions options)
      : params_(std::move(params)), options_(options) {
    for (auto* p : params_) {
      first_.emplace_back(p->value.shape());
      second_.emplace_back(p->value.shape());
    }
  }

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t steps() const { return steps_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Applies one update. Throws RuntimeAbort (before touching any value)
  /// if a trainable gradient is not finite.
  void step() {
    for (const auto* p : params_)
      if (p->trainable && !p->grad.all_finite())
        throw RuntimeAbort("non-finite gradient in parameter " + p->name);
    ++steps_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (!p.trainable) continue;
      Tensor<T>& m = first_[i];
      Tensor<T>& v = second_[i];
      for (std::size_t k = 0; k < p.value.numel(); ++k) {
        const double g = p.grad[k];
        const double mk = b1 * m[k] + (1.0 - b1) * g;
        const double vk = b2 * v[k] + (1.0 - b2) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = options_.lr * (mk / corr1) / (std::sqrt(vk / corr2) + options_.eps);
        p.value[k] = static_cast<T>(p.value[k] - update);
      }
    }
  }

 private:
  ParameterRefs<T> params_;
  AdamOptions options_;
  std::vector<Tensor<T>> first_;
  std::vector<Tensor<T>> second_;
  std::int64_t steps_ = 0;
};

}  // namespace autoprom
