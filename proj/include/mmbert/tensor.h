#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmbert {

enum class DType { kF32, kF64 };

std::string_view dtype_name(DType dtype);

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl;
struct TensorAccess;
}  // namespace detail

// Dense row-major array. Copies of a Tensor share storage; the values are
// treated as immutable once an op has produced them, except that leaves
// (parameters) are updated in place by the optimizer outside of any tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::kF32);

  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::kF32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::kF32);
  static Tensor scalar(double value, DType dtype = DType::kF32);
  static Tensor full(Shape shape, double value, DType dtype = DType::kF32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<const T> values() const;
  template <typename T>
  std::span<T> mutable_values();

  double value(std::size_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  // Gradient as a detached tensor; throws when absent.
  Tensor grad() const;
  std::vector<double> grad_vector() const;
  template <typename T>
  std::span<const T> grad_values() const;
  // Allocates a zero gradient buffer when absent.
  template <typename T>
  std::span<T> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Deep copy of the values, without gradient or tape participation.
  Tensor detach() const;
  Tensor to(DType dtype) const;
  // Detached copy with a new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool bitwise_equal(const Tensor& other) const;

 private:
  friend struct detail::TensorAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace mmbert
