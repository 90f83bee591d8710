#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mitodet/common.hpp"

namespace mitodet {

/// Interleaved 8-bit RGB raster, row-major.
class RgbImage {
 public:
  RgbImage() = default;
  RgbImage(int width, int height, std::uint8_t fill = 0)
      : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height * 3, fill) {
    if (width < 0 || height < 0) throw DimensionError("negative image dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  std::uint8_t& at(int x, int y, int c) { return data_[index(x, y) + c]; }
  std::uint8_t at(int x, int y, int c) const { return data_[index(x, y) + c]; }

  std::span<std::uint8_t> bytes() { return data_; }
  std::span<const std::uint8_t> bytes() const { return data_; }

  bool operator==(const RgbImage&) const = default;

 private:
  std::size_t index(int x, int y) const { return (static_cast<std::size_t>(y) * width_ + x) * 3; }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Float image used as the working buffer for resampling and filtering.
struct FloatImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> values;  // channel-interleaved

  FloatImage() = default;
  FloatImage(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c), values(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

inline FloatImage to_float(const RgbImage& img) {
  FloatImage out(img.width(), img.height(), 3);
  auto src = img.bytes();
  std::transform(src.begin(), src.end(), out.values.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  return out;
}

inline std::uint8_t clamp_to_byte(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v));
}

inline RgbImage to_rgb(const FloatImage& img) {
  RgbImage out(img.width, img.height);
  auto dst = out.bytes();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = clamp_to_byte(img.values[i]);
  return out;
}

/// Reflect-101 index (…2 1 | 0 1 2 … n-1 | n-2 …), valid for any integer.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

enum class Border { kReflect, kClamp };

/// Bilinear sample at continuous coordinates (pixel centers at integers).
inline void sample_bilinear(const FloatImage& img, double x, double y, Border border, float* out) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const double ax = x - fx;
  const double ay = y - fy;
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  auto fix = [&](int i, int n) {
    return border == Border::kReflect ? reflect_index(i, n) : std::clamp(i, 0, n - 1);
  };
  const int xa = fix(x0, img.width), xb = fix(x0 + 1, img.width);
  const int ya = fix(y0, img.height), yb = fix(y0 + 1, img.height);
  for (int c = 0; c < img.channels; ++c) {
    const double top = (1.0 - ax) * img.at(xa, ya, c) + ax * img.at(xb, ya, c);
    const double bottom = (1.0 - ax) * img.at(xa, yb, c) + ax * img.at(xb, yb, c);
    out[c] = static_cast<float>((1.0 - ay) * top + ay * bottom);
  }
}

/// Bilinear resize with half-pixel-center alignment and edge clamping.
inline RgbImage resize_bilinear(const RgbImage& src, int width, int height) {
  if (width <= 0 || height <= 0 || src.empty()) throw DimensionError("resize to empty size");
  if (width == src.width() && height == src.height()) return src;
  const FloatImage f = to_float(src);
  FloatImage out(width, height, 3);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double yy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    for (int x = 0; x < width; ++x) {
      const double xx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      sample_bilinear(f, xx, yy, Border::kClamp, &out.at(x, y, 0));
    }
  }
  return to_rgb(out);
}

/// Copies the window [x0, x0+w) × [y0, y0+h); the window must lie inside the image.
inline RgbImage crop(const RgbImage& src, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > src.width() || y0 + h > src.height()) {
    throw DimensionError("crop window outside image");
  }
  RgbImage out(w, h);
  auto s = src.bytes();
  auto d = out.bytes();
  for (int y = 0; y < h; ++y) {
    const auto row = s.begin() + (static_cast<std::ptrdiff_t>(y0 + y) * src.width() + x0) * 3;
    std::copy(row, row + static_cast<std::ptrdiff_t>(w) * 3, d.begin() + static_cast<std::ptrdiff_t>(y) * w * 3);
  }
  return out;
}

/// Origin of a size×size window centered at `center`, clamped so the window
/// stays inside [0, extent).
inline int clamped_origin(int center, int size, int extent) {
  return std::clamp(center - size / 2, 0, std::max(0, extent - size));
}

inline std::vector<float> to_gray(const RgbImage& img) {
  std::vector<float> g(img.pixel_count());
  auto b = img.bytes();
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = 0.299f * b[3 * i] + 0.587f * b[3 * i + 1] + 0.114f * b[3 * i + 2];
  }
  return g;
}

/// Separable Gaussian blur (kernel truncated at 4 sigma, reflect border),
/// applied in place to every channel.
inline void gaussian_blur_inplace(FloatImage& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (auto& k : kernel) k /= sum;

  FloatImage tmp(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.at(reflect_index(x + k, img.width), y, c);
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(x, reflect_index(y + k, img.height), c);
        img.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace mitodet
