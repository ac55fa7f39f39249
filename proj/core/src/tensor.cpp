#include "msht/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace msht {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor of shape " + shape_to_string(shape_) + " given " +
                     std::to_string(data_.size()) + " values");
  }
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank mismatch for shape " + shape_to_string(shape_));
  }
  std::int64_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape_[axis]) throw ShapeError("index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::int64_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::int64_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor out = *this;
  return std::move(out).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError("shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace msht
