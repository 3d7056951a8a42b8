#include "fedzda/tape.hpp"

#include <string>

#include "fedzda/errors.hpp"

namespace fedzda {

template <typename T>
std::size_t Tape<T>::check(const Var<T>& v) const {
  if (v.tape_ == nullptr) throw UsageError("Var is not attached to a tape");
  if (v.tape_ != this) throw UsageError("Var belongs to a different tape");
  if (v.generation_ != generation_ || v.id_ >= nodes_.size())
    throw UsageError("Var refers to a tape pass that was already consumed");
  return v.id_;
}

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1, generation_);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T>& t) {
  Node n;
  n.ref = &t;
  n.sink = t.requires_grad() ? &t : nullptr;
  n.needs_grad = t.requires_grad();
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::constant(const Tensor<T>& t) {
  Node n;
  n.ref = &t;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T>&& t) {
  Node n;
  n.owned = std::move(t);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || nodes_[check(in)].needs_grad;
  if (checked_ && !value.all_finite())
    throw NumericError("non-finite value produced by " + std::string(op));
  Node n;
  n.owned = std::move(value);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename T>
const Tensor<T>& Tape<T>::value(const Var<T>& v) const {
  return nodes_[check(v)].value();
}

template <typename T>
bool Tape<T>::needs_grad(const Var<T>& v) const {
  return nodes_[check(v)].needs_grad;
}

template <typename T>
std::span<T> Tape<T>::grad(const Var<T>& v) {
  Node& n = nodes_[check(v)];
  if (n.grad.empty()) n.grad.assign(n.value().size(), T{0});
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  const std::size_t root = check(loss);
  if (nodes_[root].value().size() != 1)
    throw UsageError("backward needs a scalar loss, got shape " +
                     shape_str(nodes_[root].value().shape()));
  if (nodes_[root].needs_grad) {
    nodes_[root].grad.assign(1, T{1});
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, std::span<const T>(n.grad));
      if (n.sink) {
        auto g = n.sink->grad();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      }
    }
  }
  clear();
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  ++generation_;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace fedzda
