#include "sopssl/tensor.hpp"

#include <cmath>
#include <sstream>

namespace sopssl {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int shape_numel(const Shape& s) {
  int n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<int>(data_.size()))
    throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::identity(int d) {
  Tensor t({d, d});
  for (int i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

double Tensor::value() const {
  if (!is_scalar()) throw ContractError("value() on non-scalar tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sopssl
