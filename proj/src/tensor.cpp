#include "conclu/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "conclu/errors.hpp"

namespace conclu::diff {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(values_.size()) + " values");
  }
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  values_.assign(shape_size(shape_), fill);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), cols}, std::move(v));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  throw DimensionError("rows() on tensor of shape " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  throw DimensionError("cols() on tensor of shape " + shape_string(shape_));
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  }
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.values_.size() != values_.size()) {
    throw DimensionError("cannot add " + shape_string(other.shape_) + " into " +
                         shape_string(shape_));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

}  // namespace conclu::diff
