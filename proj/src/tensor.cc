#include "mmbert/tensor.h"

#include <cstring>
#include <sstream>

#include "mmbert/error.h"
#include "tensor_impl.h"

namespace mmbert {

using detail::TensorImpl;

std::string_view dtype_name(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    require(e > 0, ErrorKind::kShape, "tensor extents must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dtype;
  const std::size_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  if (dtype == DType::kF32) {
    impl->f32.assign(n, 0.0f);
  } else {
    impl->f64.assign(n, 0.0);
  }
  impl_ = std::move(impl);
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  require(values.size() == t.numel(), ErrorKind::kShape,
          "value count " + std::to_string(values.size()) + " does not match shape " +
              shape_string(t.shape()));
  detail::dispatch(dtype, [&]<typename T>() {
    auto& data = t.impl_->data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) data[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return from_values({1}, {value}, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  detail::dispatch(dtype, [&]<typename T>() {
    for (auto& v : t.impl_->data<T>()) v = static_cast<T>(value);
  });
  return t;
}

const Shape& Tensor::shape() const {
  require(defined(), ErrorKind::kContract, "use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), ErrorKind::kShape,
          "axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  require(defined(), ErrorKind::kContract, "use of undefined tensor");
  return impl_->dtype;
}

template <typename T>
std::span<const T> Tensor::values() const {
  require(dtype() == detail::dtype_of<T>(), ErrorKind::kContract,
          "tensor dtype is " + std::string(dtype_name(dtype())));
  return impl_->data<T>();
}

template <typename T>
std::span<T> Tensor::mutable_values() {
  require(dtype() == detail::dtype_of<T>(), ErrorKind::kContract,
          "tensor dtype is " + std::string(dtype_name(dtype())));
  return impl_->data<T>();
}

template std::span<const float> Tensor::values<float>() const;
template std::span<const double> Tensor::values<double>() const;
template std::span<float> Tensor::mutable_values<float>();
template std::span<double> Tensor::mutable_values<double>();

double Tensor::value(std::size_t flat_index) const {
  require(flat_index < numel(), ErrorKind::kShape, "flat index out of range");
  return dtype() == DType::kF32 ? static_cast<double>(impl_->f32[flat_index])
                                : impl_->f64[flat_index];
}

double Tensor::item() const {
  require(numel() == 1, ErrorKind::kShape, "item() on tensor of shape " + shape_string(shape()));
  return value(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
  return out;
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require(defined(), ErrorKind::kContract, "use of undefined tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return defined() && impl_->has_grad; }

Tensor Tensor::grad() const {
  require(has_grad(), ErrorKind::kContract, "tensor has no gradient");
  Tensor g(shape(), dtype());
  g.impl_->f32 = impl_->grad_f32;
  g.impl_->f64 = impl_->grad_f64;
  return g;
}

std::vector<double> Tensor::grad_vector() const { return grad().to_vector(); }

template <typename T>
std::span<const T> Tensor::grad_values() const {
  require(has_grad(), ErrorKind::kContract, "tensor has no gradient");
  require(dtype() == detail::dtype_of<T>(), ErrorKind::kContract, "gradient dtype mismatch");
  return impl_->grad<T>();
}

template <typename T>
std::span<T> Tensor::mutable_grad() {
  require(dtype() == detail::dtype_of<T>(), ErrorKind::kContract, "gradient dtype mismatch");
  if (!impl_->has_grad) {
    impl_->grad<T>().assign(numel(), T{0});
    impl_->has_grad = true;
  }
  return impl_->grad<T>();
}

template std::span<const float> Tensor::grad_values<float>() const;
template std::span<const double> Tensor::grad_values<double>() const;
template std::span<float> Tensor::mutable_grad<float>();
template std::span<double> Tensor::mutable_grad<double>();

void Tensor::zero_grad() {
  if (!has_grad()) return;
  std::fill(impl_->grad_f32.begin(), impl_->grad_f32.end(), 0.0f);
  std::fill(impl_->grad_f64.begin(), impl_->grad_f64.end(), 0.0);
}

void Tensor::clear_grad() {
  if (!defined()) return;
  impl_->has_grad = false;
  impl_->grad_f32.clear();
  impl_->grad_f32.shrink_to_fit();
  impl_->grad_f64.clear();
  impl_->grad_f64.shrink_to_fit();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = dtype();
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  return from_values(shape(), to_vector(), target);
}

Tensor Tensor::reshaped(Shape new_shape) const {
  validate_shape(new_shape);
  require(shape_numel(new_shape) == numel(), ErrorKind::kShape,
          "cannot reshape " + shape_string(shape()) + " to " + shape_string(new_shape));
  Tensor t = detach();
  t.impl_->shape = std::move(new_shape);
  return t;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  if (dtype() == DType::kF32) {
    return std::memcmp(impl_->f32.data(), other.impl_->f32.data(), numel() * sizeof(float)) == 0;
  }
  return std::memcmp(impl_->f64.data(), other.impl_->f64.data(), numel() * sizeof(double)) == 0;
}

}  // namespace mmbert
