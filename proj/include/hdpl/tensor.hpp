#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdpl {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size());
  std::int64_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = s;
    s *= shape[i];
  }
  return strides;
}

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <class Scalar>
struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until touched
  bool requires_grad = false;
};
}  // namespace detail

// Shared-buffer dense n-d array. Copies are shallow; clone() is deep.
template <class Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<Scalar>>()) {
    for (auto d : shape)
      if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(hdpl::numel(impl_->shape)), fill);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false) {
    Tensor t(std::move(shape), Scalar(0), requires_grad);
    if (static_cast<std::int64_t>(values.size()) != t.size())
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not fill shape " + shape_str(t.shape()));
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Tensor t(Shape{1}, v, requires_grad);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }

  Scalar* data() { return impl_->data.data(); }
  const Scalar* data() const { return impl_->data.data(); }
  std::vector<Scalar>& values() { return impl_->data; }
  const std::vector<Scalar>& values() const { return impl_->data; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<Scalar>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), Scalar(0));
    return impl_->grad;
  }
  const std::vector<Scalar>& grad_view() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar(0));
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<Scalar>>(*impl_);
    return t;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape(), Other(0), requires_grad());
    for (std::int64_t i = 0; i < size(); ++i) t.data()[i] = static_cast<Other>(data()[i]);
    return t;
  }

  bool same_buffer(const Tensor& o) const { return impl_ == o.impl_; }
  detail::TensorImpl<Scalar>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<Scalar>> impl_;
};

}  // namespace hdpl
