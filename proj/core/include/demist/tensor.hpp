#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace demist {

class Rng;

// Dense row-major float32 tensor. Layout conventions across the library:
//   4D [B, H, W, C] (channels innermost), 3D [B, N, C], 2D [rows, cols].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, float value);
  static Tensor from(std::vector<int> shape, std::vector<float> data);
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev, float mean = 0.f);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 4D accessor, [b, y, x, c].
  float& at(int b, int y, int x, int c);
  float at(int b, int y, int x, int c) const;

  void fill(float value);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::int64_t shape_size(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace demist
