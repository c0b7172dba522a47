#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmbert/random.h"
#include "mmbert/tensor.h"

namespace mmbert {

// Ordered collection of named trainable tensors. Order of registration is the
// serialization order.
class ParameterStore {
 public:
  // Registers a leaf and marks it as requiring a gradient.
  Tensor add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
  void clear_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace init {

Tensor normal(Shape shape, double stddev, Rng& rng, DType dtype);
Tensor zeros(Shape shape, DType dtype);
Tensor ones(Shape shape, DType dtype);

}  // namespace init

}  // namespace mmbert
