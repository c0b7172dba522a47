#pragma once

#include <memory>
#include <type_traits>
#include <vector>

#include "mmbert/tensor.h"

namespace mmbert::detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<float> grad_f32;
  std::vector<double> grad_f64;

  template <typename T>
  std::vector<T>& data() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }
  template <typename T>
  std::vector<T>& grad() {
    if constexpr (std::is_same_v<T, float>) {
      return grad_f32;
    } else {
      return grad_f64;
    }
  }
};

struct TensorAccess {
  static TensorImpl& impl(const Tensor& t) { return *t.impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
};

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

template <typename F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::kF32) return f.template operator()<float>();
  return f.template operator()<double>();
}

}  // namespace mmbert::detail
