#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace ssldetr {

// Dense row-major tensor of doubles. The whole laboratory runs in double
// precision so finite-difference gradient checks are meaningful.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from_scalar(double value) { return Tensor({}, {value}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D and 3-D accessors; bounds are the caller's responsibility.
  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t c, int64_t y, int64_t x) {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  double at(int64_t c, int64_t y, int64_t x) const {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }

  double scalar() const;
  bool all_finite() const;
  double max_abs() const;

  Tensor reshaped(std::vector<int64_t> new_shape) const;

  void fill(double value);
  void add_(const Tensor& other);      // elementwise, shapes must match
  void scale_(double factor);

  std::string shape_str() const;
  static std::string shape_str(const std::vector<int64_t>& shape);
  static int64_t shape_numel(const std::vector<int64_t>& shape);

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

bool allclose(const Tensor& a, const Tensor& b, double atol = 1e-12, double rtol = 0.0);

}  // namespace ssldetr
