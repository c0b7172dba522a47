#include "mmbert/parameters.h"

#include "mmbert/error.h"

namespace mmbert {

Tensor ParameterStore::add(const std::string& name, Tensor tensor) {
  require(!contains(name), ErrorKind::kContract, "duplicate parameter name " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(name, tensor);
  return tensor;
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  fail(ErrorKind::kContract, "unknown parameter " + name);
}

std::vector<Tensor> ParameterStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [n, t] : entries_) out.push_back(t);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::clear_grads() {
  for (auto& [n, t] : entries_) t.clear_grad();
}

namespace init {

Tensor normal(Shape shape, double stddev, Rng& rng, DType dtype) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor::from_values(std::move(shape), v, dtype);
}

Tensor zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor ones(Shape shape, DType dtype) { return Tensor::full(std::move(shape), 1.0, dtype); }

}  // namespace init

}  // namespace mmbert
