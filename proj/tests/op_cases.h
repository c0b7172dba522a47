#pragma once

#include <functional>
#include <vector>

#include "mmbert/ops.h"
#include "mmbert/random.h"
#include "mmbert/tensor.h"

namespace mmbert::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, DType dtype = DType::kF64, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from_values(std::move(shape), v, dtype);
}

// Fixed random weights turn any tensor-valued op into a scalar with a
// non-trivial upstream gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng, y.dtype())));
}

struct OpCase {
  const char* name;
  Shape shape;
  std::function<Tensor(const Tensor&)> f;
};

// One scalar-valued probe per differentiable op (and per differentiable
// argument). Fixed operands are drawn from rng once.
inline std::vector<OpCase> op_cases(Rng& rng) {
  const std::vector<std::uint8_t> key_mask{1, 1, 0, 1, 0};
  const std::vector<std::uint8_t> row_mask{0, 1, 1, 0};
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  const std::vector<int> targets{1, ops::kIgnoreIndex, 4, 0};
  Tensor w = random_tensor({5, 3}, rng);
  Tensor lhs = random_tensor({2, 4}, rng);
  Tensor other = random_tensor({4, 5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor gamma = random_tensor({5}, rng);
  Tensor beta = random_tensor({5}, rng);
  Tensor conv_w = random_tensor({3, 2, 3, 3}, rng, DType::kF64, 0.5);
  Tensor conv_b = random_tensor({3}, rng);
  return {
      {"matmul lhs", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::matmul(x, w), 1); }},
      {"matmul rhs", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::matmul(lhs, x), 2); }},
      {"transpose", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::transpose(x), 3); }},
      {"reshape", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::reshape(x, {2, 10}), 4); }},
      {"add", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::add(x, other), 5); }},
      {"sub", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::sub(other, x), 6); }},
      {"mul", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::mul(x, x), 7); }},
      {"scale", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::scale(x, -1.7), 8); }},
      {"add_bias x", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::add_bias(x, bias), 9); }},
      {"add_bias b", {5}, [=](const Tensor& b) { return weighted_sum(ops::add_bias(other, b), 10); }},
      {"softmax axis1", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::softmax(x, 1), 11); }},
      {"softmax axis0", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::softmax(x, 0), 12); }},
      {"masked_softmax", {4, 5},
       [=](const Tensor& x) { return weighted_sum(ops::masked_softmax(x, key_mask), 13); }},
      {"layer_norm x", {4, 5},
       [=](const Tensor& x) { return weighted_sum(ops::layer_norm(x, gamma, beta, 1e-5), 14); }},
      {"layer_norm gamma", {5},
       [=](const Tensor& g) { return weighted_sum(ops::layer_norm(other, g, beta, 1e-5), 15); }},
      {"layer_norm beta", {5},
       [=](const Tensor& b) { return weighted_sum(ops::layer_norm(other, gamma, b, 1e-5), 16); }},
      {"gelu tanh", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::gelu(x), 17); }},
      {"gelu exact", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::gelu(x, true), 18); }},
      {"cross_entropy", {4, 5}, [=](const Tensor& x) { return ops::cross_entropy(x, targets); }},
      {"sum", {4, 5}, [=](const Tensor& x) { return ops::sum(x); }},
      {"mean", {4, 5}, [=](const Tensor& x) { return weighted_sum(ops::mean(x), 19); }},
      {"gather_rows", {4, 5},
       [=](const Tensor& x) { return weighted_sum(ops::gather_rows(x, rows), 20); }},
      {"concat_rows", {4, 5},
       [=](const Tensor& x) {
         const std::vector<Tensor> parts{x, other, x};
         return weighted_sum(ops::concat_rows(parts), 21);
       }},
      {"concat_cols", {4, 5},
       [=](const Tensor& x) {
         const std::vector<Tensor> parts{other, x};
         return weighted_sum(ops::concat_cols(parts), 22);
       }},
      {"slice_cols", {4, 5},
       [=](const Tensor& x) { return weighted_sum(ops::slice_cols(x, 1, 3), 23); }},
      {"masked_mean_rows", {4, 5},
       [=](const Tensor& x) { return weighted_sum(ops::masked_mean_rows(x, row_mask), 24); }},
      {"conv2d input", {2, 6, 5},
       [=](const Tensor& x) { return weighted_sum(ops::conv2d(x, conv_w, conv_b, 2, 1), 25); }},
      {"conv2d weight", {3, 2, 3, 3},
       [=](const Tensor& wt) {
         Rng local(99);
         return weighted_sum(ops::conv2d(random_tensor({2, 6, 5}, local), wt, conv_b, 1, 1), 26);
       }},
      {"conv2d bias", {3},
       [=](const Tensor& b) {
         Rng local(98);
         return weighted_sum(ops::conv2d(random_tensor({2, 5, 5}, local), conv_w, b, 2, 0), 27);
       }},
      {"global_avg_pool", {3, 4, 2},
       [=](const Tensor& x) { return weighted_sum(ops::global_avg_pool(x), 28); }},
  };
}

}  // namespace mmbert::testing
