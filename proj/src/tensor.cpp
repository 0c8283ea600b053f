#include "gepd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace gepd {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  return fmt::format("({})", fmt::join(shape, ", "));
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) {
    throw std::invalid_argument(fmt::format("tensor: {} values do not fit shape {}",
                                            data_.size(), shape_string(shape_)));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

void Tensor::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw std::invalid_argument(fmt::format("tensor: cannot reshape {} to {}",
                                            shape_string(shape_), shape_string(shape)));
  }
  shape_ = std::move(shape);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw std::invalid_argument(fmt::format("tensor: shape mismatch {} vs {}",
                                            shape_string(shape_), shape_string(other.shape_)));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw std::out_of_range("tensor: row slice out of range");
  }
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  Shape shape = shape_;
  shape[0] = end - begin;
  std::vector<double> values(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                             data_.begin() + static_cast<std::ptrdiff_t>(end * row));
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (shape_.empty()) throw std::out_of_range("tensor: gather on scalar");
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  Shape shape = shape_;
  shape[0] = rows.size();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= shape_[0]) throw std::out_of_range("tensor: gather index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.empty() && a.rank() <= 1) return b;
  if (b.empty() && b.rank() <= 1) return a;
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw std::invalid_argument(fmt::format("concat_rows: incompatible shapes {} and {}",
                                            shape_string(a.shape()), shape_string(b.shape())));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> values;
  values.reserve(a.size() + b.size());
  values.insert(values.end(), a.storage().begin(), a.storage().end());
  values.insert(values.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(shape), std::move(values));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gepd
