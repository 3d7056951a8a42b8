#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "fedzda/errors.hpp"
#include "fedzda/tensor.hpp"

namespace fedzda {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; invalid once the tape
/// is cleared (after backward or clear()).
template <typename T>
class Var {
 public:
  Var() = default;

  bool attached() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Reverse-mode gradient tape. Operations append nodes in execution order, so
/// the node list is already topologically sorted; backward walks it once in
/// reverse. One tape belongs to one thread for the duration of a pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const T> grad_out)>;

  /// Checked tapes reject non-finite values as soon as an op produces them.
  explicit Tape(bool checked = true) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// References an external tensor. If it requires grad, backward() adds
  /// d(loss)/d(tensor) into its grad buffer. The tensor must outlive the pass.
  Var<T> leaf(Tensor<T>& t);
  /// References an external tensor that never receives gradients.
  Var<T> constant(const Tensor<T>& t);
  /// Takes ownership of a tensor that never receives gradients.
  Var<T> constant(Tensor<T>&& t);

  /// Appends an op result. It participates in backward iff any input does.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);

  const Tensor<T>& value(const Var<T>& v) const;
  bool needs_grad(const Var<T>& v) const;
  /// Accumulation buffer for v's gradient (allocated on first use, zeroed).
  std::span<T> grad(const Var<T>& v);

  /// Populates grads of all requires_grad leaves reachable from a scalar loss,
  /// then frees the intermediates.
  void backward(const Var<T>& loss);
  void clear();

  bool checked() const noexcept { return checked_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* sink = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;

    const Tensor<T>& value() const { return ref ? *ref : owned; }
  };

  std::size_t check(const Var<T>& v) const;
  Var<T> push(Node node);

  std::vector<Node> nodes_;
  bool checked_;
  std::uint64_t generation_ = 1;
};

extern template class Tape<float>;
extern template class Tape<double>;

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (!tape_) throw UsageError("Var is not attached to a tape");
  return tape_->value(*this);
}

}  // namespace fedzda
