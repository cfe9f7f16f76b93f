#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "autoprom/tensor.hpp"

namespace autoprom {

/// A learnable (or frozen) tensor with its gradient accumulator.
/// Frozen parameters never accumulate gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
using ParameterRefs = std::vector<Parameter<T>*>;

/// Named non-learnable state that still belongs in a checkpoint
/// (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Visitor interface every stateful layer implements.
template <typename T>
struct StateVisitor {
  std::function<void(Parameter<T>&)> on_parameter;
  std::function<void(Buffer<T>)> on_buffer;
};

template <typename T>
std::size_t count_parameters(const ParameterRefs<T>& params, bool trainable_only) {
  std::size_t n = 0;
  for (const auto* p : params)
    if (!trainable_only || p->trainable) n += p->value.numel();
  return n;
}

/// FNV-1a over raw bytes of every parameter value; a cheap fingerprint for
/// freeze checks and checkpoint compatibility.
template <typename T>
std::uint64_t fingerprint(const ParameterRefs<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.numel() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace autoprom
