#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

// Dense H x W x C array of doubles in interleaved row-major layout.
// Images hold values in [0, 1]; depth maps are single-channel and
// non-negative. Double precision keeps the physics round trips and the
// metric oracles exact; conversion to float32 happens only at the
// network boundary.
class Image {
 public:
  Image() = default;
  Image(int h, int w, int c) : h_(h), w_(w), c_(c), v_(static_cast<std::size_t>(h) * w * c, 0.0) {}

  static Image constant(int h, int w, int c, double value);

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }

  double& at(int y, int x, int c) { return v_[idx(y, x, c)]; }
  double at(int y, int x, int c) const { return v_[idx(y, x, c)]; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  bool same_shape(const Image& o) const { return h_ == o.h_ && w_ == o.w_ && c_ == o.c_; }
  bool in_unit_range() const;
  double min_value() const;
  double max_value() const;

 private:
  std::size_t idx(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * w_ + x) * c_ + c;
  }
  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> v_;
};

// Single-channel positive array in the same container.
using DepthMap = Image;

// --- geometry ---------------------------------------------------------

// k in [0, 8): (k & 3) counter-clockwise 90-degree rotations, then an
// optional horizontal flip when (k & 4). Rotations need square inputs.
Image apply_dihedral(const Image& img, int k);
Image crop(const Image& img, int y0, int x0, int h, int w);
Image reflect_pad(const Image& img, int top, int bottom, int left, int right);

// --- quantization -----------------------------------------------------

// Round-trip helpers shared by the synthesizer and the loaders so that
// "recompose from stored files" is bit-exact.
std::uint8_t quantize8(double v);
std::uint16_t quantize16(double v);
double dequantize8(std::uint8_t v);
double dequantize16(std::uint16_t v);
Image quantize_image8(const Image& img);   // snaps values to the 8-bit grid
Image quantize_image16(const Image& img);  // snaps values to the 16-bit grid

// --- PNG IO -----------------------------------------------------------

void write_png8(const std::string& path, const Image& img);     // 1 or 3 channels
void write_png16(const std::string& path, const Image& depth);  // 1 channel
Image read_png8(const std::string& path, int expect_channels = 3);
Image read_png16(const std::string& path);

// --- tensor bridge ----------------------------------------------------

Tensor to_tensor(const Image& img);                        // [1, H, W, C] float32
Tensor stack_to_tensor(const std::vector<Image>& images);  // [B, H, W, C]
Image to_image(const Tensor& t, int batch_index = 0);      // from [B, H, W, C]

}  // namespace demist
