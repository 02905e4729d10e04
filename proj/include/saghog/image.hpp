#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "saghog/rng.hpp"

namespace saghog {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // row-major, intensity 0..255

  GrayImage() = default;
  GrayImage(int w, int h, uint8_t fill = 0)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {
    if (w < 1 || h < 1) throw std::invalid_argument("GrayImage: empty image");
  }

  uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  // Replicated-border access for local windows and gradient kernels.
  uint8_t at_clamped(int x, int y) const {
    if (x < 0) x = 0;
    if (x >= width) x = width - 1;
    if (y < 0) y = 0;
    if (y >= height) y = height - 1;
    return at(x, y);
  }
  size_t size() const { return data.size(); }
};

// Interleaved RGB, 8 bit per channel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0) {
    if (w < 1 || h < 1) throw std::invalid_argument("RgbImage: empty image");
  }
  const uint8_t* px(int x, int y) const { return &data[(static_cast<size_t>(y) * width + x) * 3]; }
  uint8_t* px(int x, int y) { return &data[(static_cast<size_t>(y) * width + x) * 3]; }
};

// Project-wide polarity: true = ink (foreground), false = background.
struct BinaryImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // 0 or 1

  BinaryImage() = default;
  BinaryImage(int w, int h, bool fill = false)
      : width(w), height(h), data(static_cast<size_t>(w) * h, fill ? 1 : 0) {
    if (w < 1 || h < 1) throw std::invalid_argument("BinaryImage: empty image");
  }

  bool at(int x, int y) const { return data[static_cast<size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { data[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
  size_t ink_count() const {
    size_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
  bool operator==(const BinaryImage& o) const {
    return width == o.width && height == o.height && data == o.data;
  }
};

enum class MorphMode { Erode, Dilate };

// 3x3 structuring element, row-major, [dy+1][dx+1] order when iterated.
using Kernel3 = std::array<bool, 9>;

// Luma conversion, 0.299/0.587/0.114 rounded to nearest integer.
GrayImage to_gray(const RgbImage& img);
// Binary to 0/255 grayscale (ink = 0, background = 255), the dark-on-light view.
GrayImage to_gray(const BinaryImage& img);

// Global threshold maximizing between-class variance over the 256-bin
// histogram; smallest maximizing threshold wins. Pixels < t become ink.
int otsu_threshold(const std::array<uint64_t, 256>& hist);
BinaryImage binarize_otsu(const GrayImage& img);

struct SauvolaParams {
  int window = 25;   // odd, >= 3; clamped to image extent when larger
  double k = 0.2;
  double r = 128.0;  // dynamic range of standard deviation
};

// Local threshold T = m * (1 + k*(s/r - 1)); ink iff intensity < T.
// Local mean/stddev over a replicated-border window via integral images.
BinaryImage binarize_sauvola(const GrayImage& img, const SauvolaParams& p = {});

// Set morphology with out-of-bounds treated as background.
BinaryImage morph(const BinaryImage& img, const Kernel3& kernel, MorphMode mode);

struct CannyParams {
  double low = 50.0;
  double high = 150.0;
};

// Gaussian 5x5 (sigma 1.4), Sobel, non-maximum suppression, hysteresis.
BinaryImage edge_map(const GrayImage& img, const CannyParams& p = {});

// Uniformly positioned crop; inputs smaller than size are reflect-padded first.
GrayImage random_crop(const GrayImage& img, int size, Rng& rng);
RgbImage random_crop(const RgbImage& img, int size, Rng& rng);

GrayImage crop(const GrayImage& img, int x0, int y0, int w, int h);
RgbImage crop(const RgbImage& img, int x0, int y0, int w, int h);
BinaryImage crop(const BinaryImage& img, int x0, int y0, int w, int h);

}  // namespace saghog
