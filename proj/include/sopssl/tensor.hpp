#ifndef SOPSSL_TENSOR_HPP
#define SOPSSL_TENSOR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sopssl {

using Shape = std::vector<int>;

// Error taxonomy: shape/contract violations are programming errors surfaced
// as typed exceptions so the CLI can map them to distinct exit codes.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf detected after a forward op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Near-zero covariance; carries the offending sample id when known.
class DegenerateCovariance : public std::runtime_error {
 public:
  explicit DegenerateCovariance(const std::string& msg, int sample_id = -1)
      : std::runtime_error(msg), sample_id(sample_id) {}
  int sample_id;
};

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

// Dense row-major tensor of 64-bit reals. Value-semantic: copies are deep,
// read-only sharing across threads is safe. `node` is a handle into the
// active tape (-1 = constant, no gradient flows).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor identity(int d);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(data_.size()); }
  bool is_scalar() const { return numel() == 1; }
  double value() const;  // scalar tensors only

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }
  // 2-d access, row-major
  double& at(int i, int j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  // 3-d access (c, h, w)
  double& at(int c, int h, int w) {
    return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }
  double at(int c, int h, int w) const {
    return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  int node = -1;
  bool requires_grad = false;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace sopssl

#endif
