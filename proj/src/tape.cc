#include "mmbert/tape.h"

#include "mmbert/error.h"
#include "tensor_impl.h"

namespace mmbert {
namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

bool Tape::produced(const Tensor& t) const {
  for (const Node& n : nodes_) {
    if (n.output.same_storage(t)) return true;
  }
  return false;
}

void Tape::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorKind::kContract,
          "backward requires a scalar loss, got " +
              (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  require(produced(loss), ErrorKind::kContract, "loss was not produced on this tape");
  Tensor seed = loss;
  detail::dispatch(seed.dtype(), [&]<typename T>() { seed.mutable_grad<T>()[0] += T{1}; });
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

}  // namespace mmbert
