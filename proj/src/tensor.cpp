#include "qg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace qg {

namespace {

std::size_t checked_volume(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  std::size_t volume = 1;
  for (std::size_t extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_string(shape));
    volume *= extent;
  }
  return volume;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(checked_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  std::size_t volume = checked_volume(shape_);
  if (volume != data_.size()) {
    throw std::invalid_argument("tensor of shape " + shape_string(shape_) + " needs " + std::to_string(volume) +
                                " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  if (rows.size() == 0) throw std::invalid_argument("matrix needs at least one row");
  std::size_t cols = rows.begin()->size();
  std::vector<float> values;
  values.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw std::invalid_argument("ragged matrix literal");
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<float> values) { return vector(std::vector<float>(values)); }

Tensor Tensor::vector(std::vector<float> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("expected a matrix, got shape " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("expected a matrix, got shape " + shape_string(shape_));
  return shape_[1];
}

std::span<float> Tensor::row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }

std::span<const float> Tensor::row(std::size_t r) const {
  return std::span<const float>(data_).subspan(r * cols(), cols());
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const noexcept {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace qg
