#pragma once

// Dense n-dimensional tensors. A Tensor is a cheap handle onto shared
// storage: copying shares the buffer (which is what gradient accumulation
// into shared inputs requires), clone() deep-copies. Read-only sharing
// across threads is safe.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msvp/common.hpp"

namespace msvp {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    MSVP_CHECK(d > 0, "tensor extents must be positive, got ", d);
    MSVP_CHECK(n <= (int64_t{1} << 40) / d, "tensor too large");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename S>
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until touched by backward
    bool requires_grad = false;
    bool needs_grad = false;   // on the active tape's differentiable path
    bool retain_grad = false;  // keep intermediate grad after backward
  };

  Tensor() = default;

  explicit Tensor(Shape shape) : p_(std::make_shared<Impl>()) {
    p_->shape = std::move(shape);
    p_->data.assign(static_cast<size_t>(numel_of(p_->shape)), S(0));
  }

  Tensor(Shape shape, std::vector<S> data) : p_(std::make_shared<Impl>()) {
    p_->shape = std::move(shape);
    const int64_t n = numel_of(p_->shape);
    MSVP_CHECK(static_cast<int64_t>(data.size()) == n,
               "data length ", data.size(), " does not match shape ",
               shape_str(p_->shape));
    p_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.p_->data.begin(), t.p_->data.end(), value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  int64_t dim(int i) const { return p_->shape.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(p_->data.size()); }

  S* data() { return p_->data.data(); }
  const S* data() const { return p_->data.data(); }
  std::vector<S>& vec() { return p_->data; }
  const std::vector<S>& vec() const { return p_->data; }

  S item() const {
    MSVP_CHECK(numel() == 1, "item(): tensor has ", numel(), " elements");
    return p_->data[0];
  }

  Tensor clone() const {
    Tensor t;
    t.p_ = std::make_shared<Impl>(*p_);
    return t;
  }

  Tensor& set_requires_grad(bool v = true) {
    p_->requires_grad = v;
    if (v) p_->needs_grad = true;
    return *this;
  }
  bool requires_grad() const { return p_->requires_grad; }

  void mark_needs_grad() { p_->needs_grad = true; }
  bool needs_grad() const { return p_->needs_grad; }

  Tensor& set_retain_grad(bool v = true) {
    p_->retain_grad = v;
    return *this;
  }

  bool has_grad() const { return !p_->grad.empty(); }
  void ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), S(0));
  }
  S* grad() {
    ensure_grad();
    return p_->grad.data();
  }
  const std::vector<S>& grad_vec() const { return p_->grad; }
  void zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), S(0));
  }
  void drop_grad() {
    std::vector<S>().swap(p_->grad);
  }

  std::shared_ptr<Impl> impl() const { return p_; }
  bool same_storage(const Tensor& other) const { return p_ == other.p_; }

 private:
  std::shared_ptr<Impl> p_;
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape();
}

}  // namespace msvp
