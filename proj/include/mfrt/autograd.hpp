#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mfrt/tensor.hpp"

namespace mfrt {

/// Reverse-mode autograd tape.
///
/// Free-function ops append one node per executed primitive, so the node
/// order is the execution order and therefore topological: every operation's
/// inputs were produced by earlier nodes. backward() replays the tape in
/// reverse, which visits each gradient-contributing edge exactly once.
///
/// A tape is confined to a single thread. Ops record onto the thread's
/// active tape (see TapeScope); with no active tape, forward passes build no
/// graph and allocate nothing extra.
template <class S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every tracked tensor.
  void backward(Tensor<S>& loss) {
    check<usage_error>(loss.defined() && loss.numel() == 1,
                       "backward expects a scalar loss tensor");
    check<usage_error>(loss.tracked(), "loss is not connected to the recorded graph");
    loss.ensure_grad()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {
template <class S>
Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// RAII scope that makes `tape` the thread's recording target.
template <class S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(detail::active_tape<S>()) {
    detail::active_tape<S>() = &tape;
  }
  ~TapeScope() { detail::active_tape<S>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

/// Returns the tape to record onto if any input is part of the graph,
/// otherwise nullptr. Ops call this once, mark their output tracked when it
/// returns non-null, and push a single backward closure.
template <class S>
Tape<S>* tape_for(std::initializer_list<const Tensor<S>*> inputs) {
  Tape<S>* tape = detail::active_tape<S>();
  if (!tape) return nullptr;
  for (const Tensor<S>* t : inputs)
    if (t && t->defined() && t->tracked()) return tape;
  return nullptr;
}

}  // namespace mfrt
