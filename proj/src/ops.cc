#include "mmbert/ops.h"

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>

#include "mmbert/error.h"
#include "mmbert/tape.h"
#include "tensor_impl.h"

namespace mmbert::ops {
namespace {

using detail::dispatch;

std::string shp(const Tensor& t) { return shape_string(t.shape()); }

void require_defined(const Tensor& t, const char* op) {
  require(t.defined(), ErrorKind::kContract, std::string(op) + ": undefined input tensor");
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  require(a.dtype() == b.dtype(), ErrorKind::kContract,
          std::string(op) + ": dtype mismatch " + std::string(dtype_name(a.dtype())) + " vs " +
              std::string(dtype_name(b.dtype())));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, ErrorKind::kShape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shp(t));
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool wants_grad(std::span<const Tensor> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void record(const char* op, std::vector<Tensor> inputs, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(Tape::Node{op, std::move(inputs), out, std::move(fn)});
}

void check_finite(const Tensor& t, const char* op) {
  dispatch(t.dtype(), [&]<typename T>() {
    for (T v : t.values<T>()) {
      if (!std::isfinite(v)) {
        fail(ErrorKind::kNumeric, std::string(op) + " produced a non-finite value");
      }
    }
  });
}

// Gradient buffer of an input that participates in differentiation, or an
// empty span when it does not.
template <typename T>
std::span<T> input_grad(Tensor t) {
  if (!t.requires_grad()) return {};
  return t.mutable_grad<T>();
}

// C[m x n] += A[m x k] . B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

// C[m x n] += A[m x k] . B^T with B stored [n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose_into(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m x n] += A^T . B with A stored [k x m], B stored [k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::kShape,
          std::string(op) + ": shape mismatch " + shp(a) + " vs " + shp(b));
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  require_same_dtype(a, b, op);
  require_same_shape(a, b, op);
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.values<T>();
    auto y = b.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      switch (kind) {
        case Binary::kAdd: o[i] = x[i] + y[i]; break;
        case Binary::kSub: o[i] = x[i] - y[i]; break;
        case Binary::kMul: o[i] = x[i] * y[i]; break;
      }
    }
  });
  check_finite(out, op);
  if (wants_grad({&a, &b})) {
    record(op, {a, b}, out, [a, b, out, kind]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto ga = input_grad<T>(a);
        auto gb = input_grad<T>(b);
        auto x = a.values<T>();
        auto y = b.values<T>();
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (kind) {
            case Binary::kAdd:
              if (!ga.empty()) ga[i] += g[i];
              if (!gb.empty()) gb[i] += g[i];
              break;
            case Binary::kSub:
              if (!ga.empty()) ga[i] += g[i];
              if (!gb.empty()) gb[i] -= g[i];
              break;
            case Binary::kMul:
              if (!ga.empty()) ga[i] += g[i] * y[i];
              if (!gb.empty()) gb[i] += g[i] * x[i];
              break;
          }
        }
      });
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_same_dtype(a, b, "matmul");
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorKind::kShape,
          "matmul: dimension mismatch " + shp(a) + " . " + shp(b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    gemm_nn(a.values<T>().data(), b.values<T>().data(), out.mutable_values<T>().data(), m, k, n);
  });
  check_finite(out, "matmul");
  if (wants_grad({&a, &b})) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        if (a.requires_grad()) {
          auto ga = input_grad<T>(a);
          gemm_nt(g.data(), b.values<T>().data(), ga.data(), m, n, k);
        }
        if (b.requires_grad()) {
          auto gb = input_grad<T>(b);
          gemm_tn(a.values<T>().data(), g.data(), gb.data(), k, m, n);
        }
      });
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_rank(a, 2, "transpose");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out({cols, rows}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    transpose_into(a.values<T>().data(), out.mutable_values<T>().data(), rows, cols);
  });
  if (wants_grad({&a})) {
    record("transpose", {a}, out, [a, out, rows, cols]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto ga = input_grad<T>(a);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j * rows + i];
        }
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  Tensor out = a.reshaped(std::move(shape));
  if (wants_grad({&a})) {
    record("reshape", {a}, out, [a, out]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto ga = input_grad<T>(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      });
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.values<T>();
    auto o = out.mutable_values<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * f;
  });
  check_finite(out, "scale");
  if (wants_grad({&a})) {
    record("scale", {a}, out, [a, out, factor]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto ga = input_grad<T>(a);
        const T f = static_cast<T>(factor);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
      });
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  require_same_dtype(x, bias, "add_bias");
  const std::size_t n = x.shape().back();
  require(bias.numel() == n, ErrorKind::kShape,
          "add_bias: bias " + shp(bias) + " does not match trailing axis of " + shp(x));
  Tensor out(x.shape(), x.dtype());
  const std::size_t rows = x.numel() / n;
  dispatch(x.dtype(), [&]<typename T>() {
    auto xv = x.values<T>();
    auto bv = bias.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) o[r * n + j] = xv[r * n + j] + bv[j];
    }
  });
  check_finite(out, "add_bias");
  if (wants_grad({&x, &bias})) {
    record("add_bias", {x, bias}, out, [x, bias, out, rows, n]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gx = input_grad<T>(x);
        auto gb = input_grad<T>(bias);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            if (!gx.empty()) gx[r * n + j] += g[r * n + j];
            if (!gb.empty()) gb[j] += g[r * n + j];
          }
        }
      });
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  require(axis < x.rank(), ErrorKind::kShape,
          "softmax: axis " + std::to_string(axis) + " invalid for " + shp(x));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor out(s, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto xv = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t b = 0; b < inner; ++b) {
        const std::size_t base = a * len * inner + b;
        T mx = xv[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
        T total = 0;
        for (std::size_t i = 0; i < len; ++i) {
          const T e = std::exp(xv[base + i * inner] - mx);
          o[base + i * inner] = e;
          total += e;
        }
        for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= total;
      }
    }
  });
  check_finite(out, "softmax");
  if (wants_grad({&x})) {
    record("softmax", {x}, out, [x, out, outer, inner, len]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto y = out.values<T>();
        auto gx = input_grad<T>(x);
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t b = 0; b < inner; ++b) {
            const std::size_t base = a * len * inner + b;
            T dot = 0;
            for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t idx = base + i * inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_valid) {
  require_defined(x, "masked_softmax");
  const std::size_t n = x.shape().back();
  require(key_valid.size() == n, ErrorKind::kShape,
          "masked_softmax: mask length " + std::to_string(key_valid.size()) +
              " does not match trailing axis of " + shp(x));
  bool any = false;
  for (auto v : key_valid) any = any || v != 0;
  require(any, ErrorKind::kContract, "masked_softmax: every key is masked");
  const std::vector<std::uint8_t> mask(key_valid.begin(), key_valid.end());
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto xv = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xv.data() + r * n;
      T* y = o.data() + r * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (mask[j]) mx = std::max(mx, in[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        y[j] = mask[j] ? std::exp(in[j] - mx) : T{0};
        total += y[j];
      }
      for (std::size_t j = 0; j < n; ++j) y[j] /= total;
    }
  });
  check_finite(out, "masked_softmax");
  if (wants_grad({&x})) {
    record("masked_softmax", {x}, out, [x, out, rows, n]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto y = out.values<T>();
        auto gx = input_grad<T>(x);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
          for (std::size_t j = 0; j < n; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
        }
      });
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  require(eps > 0.0, ErrorKind::kConfig, "layer_norm: eps must be positive");
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  const std::size_t n = x.shape().back();
  require(gamma.numel() == n && beta.numel() == n, ErrorKind::kShape,
          "layer_norm: gamma " + shp(gamma) + " / beta " + shp(beta) +
              " must match trailing axis of " + shp(x));
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  Tensor normalized(x.shape(), x.dtype());
  Tensor inv_std({rows}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto xv = x.values<T>();
    auto gv = gamma.values<T>();
    auto bv = beta.values<T>();
    auto o = out.mutable_values<T>();
    auto xh = normalized.mutable_values<T>();
    auto rs = inv_std.mutable_values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xv.data() + r * n;
      T mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += in[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
      var /= static_cast<T>(n);
      const T inv = T{1} / std::sqrt(var + static_cast<T>(eps));
      rs[r] = inv;
      for (std::size_t j = 0; j < n; ++j) {
        const T h = (in[j] - mu) * inv;
        xh[r * n + j] = h;
        o[r * n + j] = gv[j] * h + bv[j];
      }
    }
  });
  check_finite(out, "layer_norm");
  if (wants_grad({&x, &gamma, &beta})) {
    record("layer_norm", {x, gamma, beta}, out,
           [x, gamma, beta, out, normalized, inv_std, rows, n]() {
             dispatch(out.dtype(), [&]<typename T>() {
               auto g = out.grad_values<T>();
               auto xh = normalized.values<T>();
               auto rs = inv_std.values<T>();
               auto gv = gamma.values<T>();
               auto gx = input_grad<T>(x);
               auto gg = input_grad<T>(gamma);
               auto gb = input_grad<T>(beta);
               std::vector<T> dxh(n);
               for (std::size_t r = 0; r < rows; ++r) {
                 const std::size_t base = r * n;
                 T mean_d = 0, mean_dx = 0;
                 for (std::size_t j = 0; j < n; ++j) {
                   dxh[j] = g[base + j] * gv[j];
                   mean_d += dxh[j];
                   mean_dx += dxh[j] * xh[base + j];
                   if (!gg.empty()) gg[j] += g[base + j] * xh[base + j];
                   if (!gb.empty()) gb[j] += g[base + j];
                 }
                 if (gx.empty()) continue;
                 mean_d /= static_cast<T>(n);
                 mean_dx /= static_cast<T>(n);
                 for (std::size_t j = 0; j < n; ++j) {
                   gx[base + j] += rs[r] * (dxh[j] - mean_d - xh[base + j] * mean_dx);
                 }
               }
             });
           });
  }
  return out;
}

Tensor gelu(const Tensor& x, bool exact) {
  require_defined(x, "gelu");
  Tensor out(x.shape(), x.dtype());
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCoeff = 0.044715;
  dispatch(x.dtype(), [&]<typename T>() {
    auto xv = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const T v = xv[i];
      if (exact) {
        o[i] = T{0.5} * v * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
      } else {
        const T t = std::tanh(static_cast<T>(kSqrt2OverPi) * (v + static_cast<T>(kCoeff) * v * v * v));
        o[i] = T{0.5} * v * (T{1} + t);
      }
    }
  });
  check_finite(out, "gelu");
  if (wants_grad({&x})) {
    record("gelu", {x}, out, [x, out, exact]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto xv = x.values<T>();
        auto gx = input_grad<T>(x);
        const T c = static_cast<T>(kSqrt2OverPi);
        const T k = static_cast<T>(kCoeff);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = xv[i];
          T d;
          if (exact) {
            const T cdf = T{0.5} * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
            const T pdf = std::exp(T{-0.5} * v * v) * std::numbers::inv_sqrtpi_v<T> /
                          std::numbers::sqrt2_v<T>;
            d = cdf + v * pdf;
          } else {
            const T t = std::tanh(c * (v + k * v * v * v));
            d = T{0.5} * (T{1} + t) + T{0.5} * v * (T{1} - t * t) * c * (T{1} + T{3} * k * v * v);
          }
          gx[i] += g[i] * d;
        }
      });
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_defined(logits, "cross_entropy");
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  require(targets.size() == rows, ErrorKind::kShape,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
              shp(logits));
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    require(t >= 0 && static_cast<std::size_t>(t) < classes, ErrorKind::kContract,
            "cross_entropy: target " + std::to_string(t) + " out of range for " +
                std::to_string(classes) + " classes");
    ++count;
  }
  require(count > 0, ErrorKind::kEmptyLoss, "cross_entropy: every target is ignored");
  const std::vector<int> tgt(targets.begin(), targets.end());
  Tensor out({1}, logits.dtype());
  Tensor probs(logits.shape(), logits.dtype());
  dispatch(logits.dtype(), [&]<typename T>() {
    auto x = logits.values<T>();
    auto p = probs.mutable_values<T>();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (tgt[r] == ignore_index) continue;
      const T* row = x.data() + r * classes;
      T mx = row[0];
      for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
      T z = 0;
      for (std::size_t j = 0; j < classes; ++j) z += std::exp(row[j] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t j = 0; j < classes; ++j) p[r * classes + j] = std::exp(row[j] - lse);
      total += lse - row[tgt[r]];
    }
    out.mutable_values<T>()[0] = total / static_cast<T>(count);
  });
  check_finite(out, "cross_entropy");
  if (wants_grad({&logits})) {
    record("cross_entropy", {logits}, out, [logits, out, probs, tgt, rows, classes, count,
                                            ignore_index]() {
      dispatch(out.dtype(), [&]<typename T>() {
        const T g = out.grad_values<T>()[0] / static_cast<T>(count);
        auto p = probs.values<T>();
        auto gx = input_grad<T>(logits);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t j = 0; j < classes; ++j) {
            T d = p[r * classes + j];
            if (static_cast<int>(j) == tgt[r]) d -= T{1};
            gx[r * classes + j] += g * d;
          }
        }
      });
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  Tensor out({1}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    T total = 0;
    for (T v : x.values<T>()) total += v;
    out.mutable_values<T>()[0] = total;
  });
  check_finite(out, "sum");
  if (wants_grad({&x})) {
    record("sum", {x}, out, [x, out]() {
      dispatch(out.dtype(), [&]<typename T>() {
        const T g = out.grad_values<T>()[0];
        for (T& v : input_grad<T>(x)) v += g;
      });
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_defined(table, "gather_rows");
  require_rank(table, 2, "gather_rows");
  require(!rows.empty(), ErrorKind::kShape, "gather_rows: empty row list");
  const std::size_t n_rows = table.dim(0), cols = table.dim(1);
  for (std::size_t r : rows) {
    require(r < n_rows, ErrorKind::kContract,
            "gather_rows: row " + std::to_string(r) + " out of range for " + shp(table));
  }
  const std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), cols}, table.dtype());
  dispatch(table.dtype(), [&]<typename T>() {
    auto src = table.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(src.data() + idx[i] * cols, cols, o.data() + i * cols);
    }
  });
  if (wants_grad({&table})) {
    record("gather_rows", {table}, out, [table, out, idx, cols]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gt = input_grad<T>(table);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t j = 0; j < cols; ++j) gt[idx[i] * cols + j] += g[i * cols + j];
        }
      });
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t total_rows = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    require_same_dtype(p, parts[0], "concat_rows");
    require(p.dim(1) == cols, ErrorKind::kShape,
            "concat_rows: column mismatch " + shp(p) + " vs " + shp(parts[0]));
    total_rows += p.dim(0);
  }
  Tensor out({total_rows, cols}, parts[0].dtype());
  dispatch(out.dtype(), [&]<typename T>() {
    auto o = out.mutable_values<T>();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      auto v = p.values<T>();
      std::copy(v.begin(), v.end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += v.size();
    }
  });
  if (wants_grad(parts)) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat_rows", inputs, out, [inputs, out]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        std::size_t offset = 0;
        for (const Tensor& p : inputs) {
          const std::size_t n = p.numel();
          if (p.requires_grad()) {
            auto gp = input_grad<T>(p);
            for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
          }
          offset += n;
        }
      });
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t total_cols = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    require_same_dtype(p, parts[0], "concat_cols");
    require(p.dim(0) == rows, ErrorKind::kShape,
            "concat_cols: row mismatch " + shp(p) + " vs " + shp(parts[0]));
    total_cols += p.dim(1);
  }
  Tensor out({rows, total_cols}, parts[0].dtype());
  dispatch(out.dtype(), [&]<typename T>() {
    auto o = out.mutable_values<T>();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      auto v = p.values<T>();
      const std::size_t c = p.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(v.data() + r * c, c, o.data() + r * total_cols + offset);
      }
      offset += c;
    }
  });
  if (wants_grad(parts)) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat_cols", inputs, out, [inputs, out, rows, total_cols]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        std::size_t offset = 0;
        for (const Tensor& p : inputs) {
          const std::size_t c = p.dim(1);
          if (p.requires_grad()) {
            auto gp = input_grad<T>(p);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total_cols + offset + j];
            }
          }
          offset += c;
        }
      });
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_defined(x, "slice_cols");
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(count > 0 && start + count <= cols, ErrorKind::kShape,
          "slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") out of range for " + shp(x));
  Tensor out({rows, count}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto v = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * cols + start, count, o.data() + r * count);
    }
  });
  if (wants_grad({&x})) {
    record("slice_cols", {x}, out, [x, out, rows, cols, start, count]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gx = input_grad<T>(x);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < count; ++j) gx[r * cols + start + j] += g[r * count + j];
        }
      });
    });
  }
  return out;
}

Tensor masked_mean_rows(const Tensor& x, std::span<const std::uint8_t> row_valid) {
  require_defined(x, "masked_mean_rows");
  require_rank(x, 2, "masked_mean_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(row_valid.size() == rows, ErrorKind::kShape,
          "masked_mean_rows: mask length does not match " + shp(x));
  const std::vector<std::uint8_t> mask(row_valid.begin(), row_valid.end());
  std::size_t count = 0;
  for (auto v : mask) count += v != 0;
  require(count > 0, ErrorKind::kContract, "masked_mean_rows: no valid rows");
  Tensor out({1, cols}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto v = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      for (std::size_t j = 0; j < cols; ++j) o[j] += v[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= static_cast<T>(count);
  });
  check_finite(out, "masked_mean_rows");
  if (wants_grad({&x})) {
    record("masked_mean_rows", {x}, out, [x, out, mask, rows, cols, count]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gx = input_grad<T>(x);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += g[j] / static_cast<T>(count);
        }
      });
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  require_defined(x, "dropout");
  require(rate >= 0.0 && rate < 1.0, ErrorKind::kConfig, "dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  for (auto& k : *keep) k = rng.uniform() >= rate ? 1 : 0;
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto v = x.values<T>();
    auto o = out.mutable_values<T>();
    const T s = static_cast<T>(keep_scale);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (*keep)[i] ? v[i] * s : T{0};
  });
  if (wants_grad({&x})) {
    record("dropout", {x}, out, [x, out, keep, keep_scale]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gx = input_grad<T>(x);
        const T s = static_cast<T>(keep_scale);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if ((*keep)[i]) gx[i] += g[i] * s;
        }
      });
    });
  }
  return out;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, out_channels, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] =
                inside ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                           static_cast<std::size_t>(ix)]
                       : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dx[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
               static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_defined(x, "conv2d");
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  require_same_dtype(x, weight, "conv2d");
  require_same_dtype(x, bias, "conv2d");
  require(stride >= 1, ErrorKind::kConfig, "conv2d: stride must be >= 1");
  require(weight.dim(1) == x.dim(0) && weight.dim(2) == weight.dim(3), ErrorKind::kShape,
          "conv2d: weight " + shp(weight) + " incompatible with input " + shp(x));
  require(bias.numel() == weight.dim(0), ErrorKind::kShape,
          "conv2d: bias " + shp(bias) + " does not match " + shp(weight));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  require(g.height + 2 * padding >= g.kernel && g.width + 2 * padding >= g.kernel,
          ErrorKind::kShape, "conv2d: input " + shp(x) + " smaller than kernel");
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;
  Tensor out({g.out_channels, g.out_h, g.out_w}, x.dtype());
  const bool grad = wants_grad({&x, &weight, &bias});
  // The column buffer is kept for the backward pass only when recording.
  Tensor cols({g.patch(), g.pixels()}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    T* cv = cols.mutable_values<T>().data();
    im2col(x.values<T>().data(), g, cv);
    auto o = out.mutable_values<T>();
    auto bv = bias.values<T>();
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      std::fill_n(o.data() + oc * g.pixels(), g.pixels(), bv[oc]);
    }
    gemm_nn(weight.values<T>().data(), cv, o.data(), g.out_channels, g.patch(), g.pixels());
  });
  check_finite(out, "conv2d");
  if (grad) {
    record("conv2d", {x, weight, bias}, out, [x, weight, bias, out, cols, g]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto go = out.grad_values<T>();
        if (weight.requires_grad()) {
          auto gw = input_grad<T>(weight);
          gemm_nt(go.data(), cols.values<T>().data(), gw.data(), g.out_channels, g.pixels(),
                  g.patch());
        }
        if (bias.requires_grad()) {
          auto gb = input_grad<T>(bias);
          for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            T s = 0;
            for (std::size_t p = 0; p < g.pixels(); ++p) s += go[oc * g.pixels() + p];
            gb[oc] += s;
          }
        }
        if (x.requires_grad()) {
          std::vector<T> dcols(g.patch() * g.pixels(), T{0});
          gemm_tn(weight.values<T>().data(), go.data(), dcols.data(), g.patch(), g.out_channels,
                  g.pixels());
          col2im(dcols.data(), g, input_grad<T>(x).data());
        }
      });
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_defined(x, "global_avg_pool");
  require_rank(x, 3, "global_avg_pool");
  const std::size_t channels = x.dim(0), pixels = x.dim(1) * x.dim(2);
  Tensor out({1, channels}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto v = x.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t p = 0; p < pixels; ++p) s += v[c * pixels + p];
      o[c] = s / static_cast<T>(pixels);
    }
  });
  check_finite(out, "global_avg_pool");
  if (wants_grad({&x})) {
    record("global_avg_pool", {x}, out, [x, out, channels, pixels]() {
      dispatch(out.dtype(), [&]<typename T>() {
        auto g = out.grad_values<T>();
        auto gx = input_grad<T>(x);
        for (std::size_t c = 0; c < channels; ++c) {
          const T d = g[c] / static_cast<T>(pixels);
          for (std::size_t p = 0; p < pixels; ++p) gx[c * pixels + p] += d;
        }
      });
    });
  }
  return out;
}

}  // namespace mmbert::ops
