#include "fedzda/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <functional>
#include <numeric>

#include "fedzda/errors.hpp"

namespace fedzda {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data_.size()));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= shape_.size())
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape_));
  return shape_[i];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on)
    grad_.assign(data_.size(), T{0});
  else
    grad_.clear();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (shape_numel(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  shape_ = std::move(shape);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (T v : data_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exp_mask) == exp_mask);
  return bad == 0;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace fedzda
