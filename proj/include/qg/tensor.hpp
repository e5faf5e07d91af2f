#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qg {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of 32-bit reals.
///
/// A default-constructed tensor is the null tensor (rank 0, no storage) and
/// only serves as a placeholder; every other tensor has positive extents and
/// product(shape) == size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  /// 2-D tensor from nested rows, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor vector(std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const;

  // Matrix views; require rank 2.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;

  // Exact (bitwise-value) equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

}  // namespace qg
