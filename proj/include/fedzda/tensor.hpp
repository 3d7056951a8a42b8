#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fedzda {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Gradient storage exists iff requires_grad() is set
/// and always matches the data extent.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  /// Throws DimensionError when the element count disagrees with the shape.
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on);
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad();

  /// Same element count, new extents.
  void reshape(Shape shape);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
  std::vector<T> grad_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace fedzda
