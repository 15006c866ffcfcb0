#include "ssldetr/tensor.hpp"

#include <cmath>
#include <sstream>

#include "ssldetr/errors.hpp"

namespace ssldetr {

int64_t Tensor::shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) {
      throw ShapeError("negative tensor dimension in " + shape_str(shape));
    }
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape_));
  }
  data_ = std::move(data);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

double Tensor::scalar() const {
  if (numel() != 1) {
    throw ShapeError("scalar() called on tensor with " + std::to_string(numel()) + " elements");
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) {
    m = std::max(m, std::fabs(v));
  }
  return m;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str() + " to " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

void Tensor::fill(double value) {
  for (double& v : data_) {
    v = value;
  }
}

void Tensor::add_(const Tensor& other) {
  if (!same_shape(other)) {
    throw ShapeError("add_: shape mismatch " + shape_str() + " vs " + other.shape_str());
  }
  for (size_t i = 0; i < data_.size(); ++i) {
    data_[i] += other.data_[i];
  }
}

void Tensor::scale_(double factor) {
  for (double& v : data_) {
    v *= factor;
  }
}

std::string Tensor::shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

bool allclose(const Tensor& a, const Tensor& b, double atol, double rtol) {
  if (!a.same_shape(b)) {
    return false;
  }
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double diff = std::fabs(a[i] - b[i]);
    if (diff > atol + rtol * std::fabs(b[i])) {
      return false;
    }
  }
  return true;
}

}  // namespace ssldetr
