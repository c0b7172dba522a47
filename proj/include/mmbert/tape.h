#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmbert/tensor.h"

namespace mmbert {

// Records differentiable operations in execution order. Constructing a Tape
// makes it the active tape of the current thread until it is destroyed; ops
// executed while a tape is active record themselves whenever one of their
// inputs requires a gradient. Nested tapes shadow the outer one.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    // Reads output's gradient and accumulates into the inputs' gradients.
    std::function<void()> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(Node node);
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool produced(const Tensor& t) const;

  // Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once, in
  // reverse order.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// Suspends recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

}  // namespace mmbert
