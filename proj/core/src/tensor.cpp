#include "demist/tensor.hpp"

#include <cmath>
#include <sstream>

#include "demist/errors.hpp"
#include "demist/rng.hpp"

namespace demist {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("tensor: negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.f);
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> data) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor: data size does not match shape " + shape_to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, float mean) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(rng.normal(mean, stddev));
  }
  return t;
}

float& Tensor::at(int b, int y, int x, int c) {
  const std::int64_t idx =
      ((static_cast<std::int64_t>(b) * shape_[1] + y) * shape_[2] + x) * shape_[3] + c;
  return data_[static_cast<std::size_t>(idx)];
}

float Tensor::at(int b, int y, int x, int c) const {
  return const_cast<Tensor*>(this)->at(b, y, x, c);
}

void Tensor::fill(float value) {
  for (auto& v : data_) v = value;
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace demist
