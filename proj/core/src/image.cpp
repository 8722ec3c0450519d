#include "demist/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "demist/errors.hpp"

namespace demist {

Image Image::constant(int h, int w, int c, double value) {
  Image img(h, w, c);
  std::fill(img.v_.begin(), img.v_.end(), value);
  return img;
}

bool Image::in_unit_range() const {
  for (double v : v_) {
    if (v < 0.0 || v > 1.0) return false;
  }
  return true;
}

double Image::min_value() const {
  double m = v_.empty() ? 0.0 : v_[0];
  for (double v : v_) m = std::min(m, v);
  return m;
}

double Image::max_value() const {
  double m = v_.empty() ? 0.0 : v_[0];
  for (double v : v_) m = std::max(m, v);
  return m;
}

Image apply_dihedral(const Image& img, int k) {
  require(k >= 0 && k < 8, "dihedral: k must be in [0, 8)");
  const int rot = k & 3;
  const bool flip = (k & 4) != 0;
  if (rot != 0 && img.height() != img.width()) {
    throw ShapeError("dihedral: 90/270-degree rotation needs a square crop");
  }
  const int c = img.channels();
  Image out = img;
  // One 90-degree rotation maps source (r, c) to destination (c, S-1-r).
  for (int r = 0; r < rot; ++r) {
    const int s = out.height();
    Image tmp(s, s, c);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        for (int ch = 0; ch < c; ++ch) tmp.at(x, s - 1 - y, ch) = out.at(y, x, ch);
      }
    }
    out = std::move(tmp);
  }
  if (flip) {
    Image tmp(out.height(), out.width(), c);
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) {
        for (int ch = 0; ch < c; ++ch) tmp.at(y, out.width() - 1 - x, ch) = out.at(y, x, ch);
      }
    }
    out = std::move(tmp);
  }
  return out;
}

Image crop(const Image& img, int y0, int x0, int h, int w) {
  require(y0 >= 0 && x0 >= 0 && h > 0 && w > 0 && y0 + h <= img.height() && x0 + w <= img.width(),
          "crop: window outside image");
  Image out(h, w, img.channels());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    }
  }
  return out;
}

Image reflect_pad(const Image& img, int top, int bottom, int left, int right) {
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "reflect_pad: negative padding");
  require(top < img.height() && bottom < img.height() && left < img.width() && right < img.width(),
          "reflect_pad: padding exceeds image size");
  const int h = img.height() + top + bottom;
  const int w = img.width() + left + right;
  Image out(h, w, img.channels());
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (int y = 0; y < h; ++y) {
    const int sy = reflect(y - top, img.height());
    for (int x = 0; x < w; ++x) {
      const int sx = reflect(x - left, img.width());
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

std::uint8_t quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

std::uint16_t quantize16(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

double dequantize8(std::uint8_t v) { return static_cast<double>(v) / 255.0; }
double dequantize16(std::uint16_t v) { return static_cast<double>(v) / 65535.0; }

Image quantize_image8(const Image& img) {
  Image out(img.height(), img.width(), img.channels());
  for (std::int64_t i = 0; i < img.size(); ++i) {
    out.data()[i] = dequantize8(quantize8(img.data()[i]));
  }
  return out;
}

Image quantize_image16(const Image& img) {
  Image out(img.height(), img.width(), img.channels());
  for (std::int64_t i = 0; i < img.size(); ++i) {
    out.data()[i] = dequantize16(quantize16(img.data()[i]));
  }
  return out;
}

void write_png8(const std::string& path, const Image& img) {
  require(img.channels() == 1 || img.channels() == 3, "write_png8: 1 or 3 channels expected");
  cv::Mat m(img.height(), img.width(), img.channels() == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      if (img.channels() == 3) {
        // OpenCV stores BGR.
        row[x * 3 + 0] = quantize8(img.at(y, x, 2));
        row[x * 3 + 1] = quantize8(img.at(y, x, 1));
        row[x * 3 + 2] = quantize8(img.at(y, x, 0));
      } else {
        row[x] = quantize8(img.at(y, x, 0));
      }
    }
  }
  if (!cv::imwrite(path, m)) throw DataError("write_png8: cannot write " + path);
}

void write_png16(const std::string& path, const Image& depth) {
  require(depth.channels() == 1, "write_png16: single channel expected");
  cv::Mat m(depth.height(), depth.width(), CV_16UC1);
  for (int y = 0; y < depth.height(); ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < depth.width(); ++x) row[x] = quantize16(depth.at(y, x, 0));
  }
  if (!cv::imwrite(path, m)) throw DataError("write_png16: cannot write " + path);
}

Image read_png8(const std::string& path, int expect_channels) {
  cv::Mat m = cv::imread(path, expect_channels == 3 ? cv::IMREAD_COLOR : cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("read_png8: cannot read " + path);
  Image img(m.rows, m.cols, expect_channels);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (expect_channels == 3) {
        img.at(y, x, 0) = dequantize8(row[x * 3 + 2]);
        img.at(y, x, 1) = dequantize8(row[x * 3 + 1]);
        img.at(y, x, 2) = dequantize8(row[x * 3 + 0]);
      } else {
        img.at(y, x, 0) = dequantize8(row[x]);
      }
    }
  }
  return img;
}

Image read_png16(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("read_png16: cannot read " + path);
  if (m.type() != CV_16UC1) throw DataError("read_png16: expected 16-bit single channel: " + path);
  Image img(m.rows, m.cols, 1);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < m.cols; ++x) img.at(y, x, 0) = dequantize16(row[x]);
  }
  return img;
}

Tensor to_tensor(const Image& img) {
  Tensor t({1, img.height(), img.width(), img.channels()});
  for (std::int64_t i = 0; i < img.size(); ++i) t[i] = static_cast<float>(img.data()[i]);
  return t;
}

Tensor stack_to_tensor(const std::vector<Image>& images) {
  require(!images.empty(), "stack_to_tensor: empty batch");
  const Image& first = images.front();
  Tensor t({static_cast<int>(images.size()), first.height(), first.width(), first.channels()});
  std::int64_t offset = 0;
  for (const Image& img : images) {
    require(img.same_shape(first), "stack_to_tensor: mismatched image shapes");
    for (std::int64_t i = 0; i < img.size(); ++i) t[offset + i] = static_cast<float>(img.data()[i]);
    offset += img.size();
  }
  return t;
}

Image to_image(const Tensor& t, int batch_index) {
  require(t.rank() == 4, "to_image: expected [B, H, W, C] tensor");
  require(batch_index >= 0 && batch_index < t.dim(0), "to_image: batch index out of range");
  Image img(t.dim(1), t.dim(2), t.dim(3));
  const std::int64_t n = img.size();
  const float* src = t.data() + n * batch_index;
  for (std::int64_t i = 0; i < n; ++i) img.data()[i] = static_cast<double>(src[i]);
  return img;
}

}  // namespace demist
