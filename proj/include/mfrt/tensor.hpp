#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "mfrt/common.hpp"

namespace mfrt {

/// Dense row-major tensor, templated on scalar type. Double precision is the
/// default everywhere; float is instantiated only on the benchmark path.
///
/// A Tensor is a cheap value handle onto shared storage. Data is immutable by
/// convention once an op has produced it; the gradient buffer is the only
/// mutable part and is written during backward passes. `tracked()` marks
/// tensors that participate in the current autograd graph.
template <class S>
class Tensor {
  struct Storage {
    std::vector<S> data;
    std::vector<S> grad;  // empty until ensure_grad()
    bool requires_grad = false;
    bool tracked = false;
  };

 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    validate_shape();
    store_ = std::make_shared<Storage>();
    store_->data.assign(static_cast<size_t>(numel()), S(0));
  }

  Tensor(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)) {
    validate_shape();
    check(static_cast<i64>(data.size()) == numel(), "tensor data length ", data.size(),
          " does not match shape ", shape_str(shape_));
    store_ = std::make_shared<Storage>();
    store_->data = std::move(data);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.store_->data.begin(), t.store_->data.end(), value);
    return t;
  }

  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), S(1)); }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.store_->data) v = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  static Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.store_->data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return store_ != nullptr; }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }

  i64 numel() const {
    i64 n = 1;
    for (int d : shape_) n *= d;
    return n;
  }

  S* data() { return store_->data.data(); }
  const S* data() const { return store_->data.data(); }

  S& operator[](i64 i) { return store_->data[static_cast<size_t>(i)]; }
  const S& operator[](i64 i) const { return store_->data[static_cast<size_t>(i)]; }

  S& at(std::initializer_list<int> idx) { return store_->data[static_cast<size_t>(flat_index(idx))]; }
  const S& at(std::initializer_list<int> idx) const {
    return store_->data[static_cast<size_t>(flat_index(idx))];
  }

  i64 flat_index(std::initializer_list<int> idx) const {
    check(static_cast<int>(idx.size()) == rank(), "index rank mismatch");
    i64 flat = 0;
    auto it = idx.begin();
    for (int d = 0; d < rank(); ++d, ++it) {
      check(*it >= 0 && *it < shape_[static_cast<size_t>(d)], "index out of range on axis ", d);
      flat = flat * shape_[static_cast<size_t>(d)] + *it;
    }
    return flat;
  }

  /// Marks this tensor as a differentiable leaf (a parameter).
  Tensor& set_requires_grad(bool v) {
    store_->requires_grad = v;
    store_->tracked = v;
    return *this;
  }
  bool requires_grad() const { return store_ && store_->requires_grad; }

  bool tracked() const { return store_ && store_->tracked; }
  void mark_tracked() { store_->tracked = true; }

  bool has_grad() const { return store_ && !store_->grad.empty(); }

  std::vector<S>& ensure_grad() {
    if (store_->grad.empty()) store_->grad.assign(store_->data.size(), S(0));
    return store_->grad;
  }
  std::vector<S>& grad() {
    check<usage_error>(has_grad(), "gradient buffer not populated");
    return store_->grad;
  }
  const std::vector<S>& grad() const {
    check<usage_error>(has_grad(), "gradient buffer not populated");
    return store_->grad;
  }
  void zero_grad() {
    if (store_ && !store_->grad.empty()) std::fill(store_->grad.begin(), store_->grad.end(), S(0));
  }

  /// Deep copy of the values, detached from any graph.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<Storage>();
    t.store_->data = store_->data;
    return t;
  }
  Tensor clone() const { return detach(); }

  /// Reinterprets the same storage under a new shape (no copy). Gradients
  /// flow through transparently because the buffers are shared.
  Tensor reshaped(std::vector<int> new_shape) const {
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.validate_shape();
    check(t.numel() == numel(), "reshape from ", shape_str(shape_), " to ",
          shape_str(t.shape_), " changes element count");
    t.store_ = store_;
    return t;
  }

  bool all_finite() const {
    for (const S& v : store_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_storage(const Tensor& other) const { return store_ == other.store_; }

 private:
  void validate_shape() const {
    for (int d : shape_) check(d >= 0, "negative dimension in shape ", shape_str(shape_));
  }

  std::vector<int> shape_;
  std::shared_ptr<Storage> store_;
};

using TensorD = Tensor<double>;

template <class S>
i64 numel_of(const std::vector<int>& shape) {
  i64 n = 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace mfrt
