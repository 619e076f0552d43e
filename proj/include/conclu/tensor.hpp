#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace conclu::diff {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Rank 0 (scalar), 1 (vector) and 2
// (matrix) are what the engine uses; nothing stops higher ranks from being
// stored, but no primitive consumes them.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  // For rank-2 tensors; a vector is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  // Value of a single-element tensor.
  double item() const;

  bool all_finite() const;
  void fill(double v);
  Tensor& operator+=(const Tensor& other);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

}  // namespace conclu::diff
