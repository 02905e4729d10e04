#include "saghog/image.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace saghog {

GrayImage to_gray(const RgbImage& img) {
  if (img.width < 1 || img.height < 1) throw std::invalid_argument("to_gray: empty image");
  GrayImage out(img.width, img.height);
  const uint8_t* src = img.data.data();
  for (size_t i = 0, n = out.size(); i < n; ++i) {
    const double y = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
    out.data[i] = static_cast<uint8_t>(std::lround(y));
  }
  return out;
}

GrayImage to_gray(const BinaryImage& img) {
  GrayImage out(img.width, img.height);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = img.data[i] ? 0 : 255;
  return out;
}

int otsu_threshold(const std::array<uint64_t, 256>& hist) {
  uint64_t total = 0;
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += hist[i];
    sum_all += static_cast<double>(i) * static_cast<double>(hist[i]);
  }
  if (total == 0) return 0;

  // Classes at threshold t: {i < t} vs {i >= t}. Cumulative moments keep the
  // sweep O(256); best threshold is the smallest among variance maximizers.
  int best_t = 0;
  double best_var = -1.0;
  uint64_t w0 = 0;
  double sum0 = 0.0;
  for (int t = 0; t < 256; ++t) {
    const uint64_t w1 = total - w0;
    if (w0 > 0 && w1 > 0) {
      const double mu0 = sum0 / static_cast<double>(w0);
      const double mu1 = (sum_all - sum0) / static_cast<double>(w1);
      const double d = mu0 - mu1;
      const double var = static_cast<double>(w0) * static_cast<double>(w1) * d * d;
      if (var > best_var) {
        best_var = var;
        best_t = t;
      }
    }
    w0 += hist[t];
    sum0 += static_cast<double>(t) * static_cast<double>(hist[t]);
  }
  if (best_var < 0.0) return 0;  // constant image: no separating threshold
  return best_t;
}

BinaryImage binarize_otsu(const GrayImage& img) {
  std::array<uint64_t, 256> hist{};
  for (uint8_t v : img.data) ++hist[v];
  const int t = otsu_threshold(hist);
  BinaryImage out(img.width, img.height);
  for (size_t i = 0; i < img.size(); ++i) out.data[i] = img.data[i] < t ? 1 : 0;
  return out;
}

BinaryImage binarize_sauvola(const GrayImage& img, const SauvolaParams& p) {
  int window = p.window;
  if (window < 3 || window % 2 == 0) throw std::invalid_argument("binarize_sauvola: window must be odd and >= 3");
  const int max_win = std::min(img.width, img.height);
  if (window > max_win) window = max_win % 2 == 1 ? max_win : max_win - 1;
  if (window < 1) window = 1;
  const int half = window / 2;

  // Replicate-pad by half the window, then integral images make every
  // window interior. Padded size (w+2*half) x (h+2*half).
  const int pw = img.width + 2 * half;
  const int ph = img.height + 2 * half;
  std::vector<double> isum(static_cast<size_t>(pw + 1) * (ph + 1), 0.0);
  std::vector<double> isq(static_cast<size_t>(pw + 1) * (ph + 1), 0.0);
  for (int y = 0; y < ph; ++y) {
    double row_sum = 0.0, row_sq = 0.0;
    for (int x = 0; x < pw; ++x) {
      const double v = img.at_clamped(x - half, y - half);
      row_sum += v;
      row_sq += v * v;
      isum[static_cast<size_t>(y + 1) * (pw + 1) + x + 1] =
          isum[static_cast<size_t>(y) * (pw + 1) + x + 1] + row_sum;
      isq[static_cast<size_t>(y + 1) * (pw + 1) + x + 1] =
          isq[static_cast<size_t>(y) * (pw + 1) + x + 1] + row_sq;
    }
  }
  auto box = [&](const std::vector<double>& ii, int x0, int y0, int x1, int y1) {
    // half-open box [x0,x1) x [y0,y1) in padded coordinates
    return ii[static_cast<size_t>(y1) * (pw + 1) + x1] - ii[static_cast<size_t>(y0) * (pw + 1) + x1] -
           ii[static_cast<size_t>(y1) * (pw + 1) + x0] + ii[static_cast<size_t>(y0) * (pw + 1) + x0];
  };

  BinaryImage out(img.width, img.height);
  const double n = static_cast<double>(window) * window;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int x0 = x, y0 = y;  // padded window origin for pixel (x,y)
      const double s1 = box(isum, x0, y0, x0 + window, y0 + window);
      const double s2 = box(isq, x0, y0, x0 + window, y0 + window);
      const double mean = s1 / n;
      const double var = std::max(0.0, s2 / n - mean * mean);
      const double stddev = std::sqrt(var);
      const double threshold = mean * (1.0 + p.k * (stddev / p.r - 1.0));
      out.set(x, y, img.at(x, y) < threshold);
    }
  }
  return out;
}

BinaryImage morph(const BinaryImage& img, const Kernel3& kernel, MorphMode mode) {
  bool any = false;
  for (bool b : kernel) any = any || b;
  if (!any) throw std::invalid_argument("morph: kernel has no true cell");

  BinaryImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      bool v;
      if (mode == MorphMode::Dilate) {
        // p is set iff some kernel offset b has p - b in the input set
        v = false;
        for (int dy = -1; dy <= 1 && !v; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!kernel[(dy + 1) * 3 + (dx + 1)]) continue;
            const int sx = x - dx, sy = y - dy;
            if (img.in_bounds(sx, sy) && img.at(sx, sy)) {
              v = true;
              break;
            }
          }
      } else {
        // p is set iff every kernel offset lands on ink (out of bounds fails)
        v = true;
        for (int dy = -1; dy <= 1 && v; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!kernel[(dy + 1) * 3 + (dx + 1)]) continue;
            const int sx = x + dx, sy = y + dy;
            if (!img.in_bounds(sx, sy) || !img.at(sx, sy)) {
              v = false;
              break;
            }
          }
      }
      out.set(x, y, v);
    }
  }
  return out;
}

namespace {

std::vector<float> gaussian5x5(double sigma) {
  std::vector<float> k(25);
  double sum = 0.0;
  for (int y = -2; y <= 2; ++y)
    for (int x = -2; x <= 2; ++x) {
      const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
      k[(y + 2) * 5 + (x + 2)] = static_cast<float>(v);
      sum += v;
    }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

}  // namespace

BinaryImage edge_map(const GrayImage& img, const CannyParams& p) {
  if (p.low > p.high) throw std::invalid_argument("edge_map: low > high");
  const int w = img.width, h = img.height;

  static const std::vector<float> kGauss = gaussian5x5(1.4);
  std::vector<float> smooth(static_cast<size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.f;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
          acc += kGauss[(dy + 2) * 5 + (dx + 2)] * img.at_clamped(x + dx, y + dy);
      smooth[static_cast<size_t>(y) * w + x] = acc;
    }
  auto sm = [&](int x, int y) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return smooth[static_cast<size_t>(y) * w + x];
  };

  std::vector<float> mag(static_cast<size_t>(w) * h), gxv(mag.size()), gyv(mag.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float gx = (sm(x + 1, y - 1) + 2 * sm(x + 1, y) + sm(x + 1, y + 1)) -
                       (sm(x - 1, y - 1) + 2 * sm(x - 1, y) + sm(x - 1, y + 1));
      const float gy = (sm(x - 1, y + 1) + 2 * sm(x, y + 1) + sm(x + 1, y + 1)) -
                       (sm(x - 1, y - 1) + 2 * sm(x, y - 1) + sm(x + 1, y - 1));
      const size_t i = static_cast<size_t>(y) * w + x;
      gxv[i] = gx;
      gyv[i] = gy;
      mag[i] = std::sqrt(gx * gx + gy * gy);
    }

  // Non-maximum suppression over 4 quantized directions. Strict comparison on
  // the forward neighbor thins two-pixel plateaus to a single line.
  std::vector<uint8_t> nms(mag.size(), 0);
  auto m = [&](int x, int y) -> float {
    if (x < 0 || x >= w || y < 0 || y >= h) return 0.f;
    return mag[static_cast<size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      if (mag[i] <= 0.f) continue;
      const double angle = std::atan2(gyv[i], gxv[i]);
      double a = angle * 180.0 / M_PI;
      if (a < 0) a += 180.0;
      int dx, dy;
      if (a < 22.5 || a >= 157.5) {
        dx = 1; dy = 0;
      } else if (a < 67.5) {
        dx = 1; dy = 1;
      } else if (a < 112.5) {
        dx = 0; dy = 1;
      } else {
        dx = -1; dy = 1;
      }
      if (mag[i] > m(x + dx, y + dy) && mag[i] >= m(x - dx, y - dy)) nms[i] = 1;
    }

  // Double threshold + hysteresis (8-connected BFS from strong pixels).
  BinaryImage out(w, h);
  std::vector<uint8_t> state(mag.size(), 0);  // 0 none, 1 weak, 2 strong
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      if (!nms[i]) continue;
      if (mag[i] >= p.high) {
        state[i] = 2;
        out.set(x, y, true);
        queue.emplace_back(x, y);
      } else if (mag[i] >= p.low) {
        state[i] = 1;
      }
    }
  while (!queue.empty()) {
    auto [x, y] = queue.front();
    queue.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx, ny = y + dy;
        if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
        const size_t i = static_cast<size_t>(ny) * w + nx;
        if (state[i] == 1) {
          state[i] = 2;
          out.set(nx, ny, true);
          queue.emplace_back(nx, ny);
        }
      }
  }
  return out;
}

namespace {

// Mirror with edge duplication: ...cba|abcdef|fed...
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

template <typename Img>
Img reflect_pad_to(const Img& img, int size) {
  Img out = img;
  if (img.width >= size && img.height >= size) return out;
  const int w = std::max(img.width, size), h = std::max(img.height, size);
  Img padded(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = reflect_index(x, img.width);
      const int sy = reflect_index(y, img.height);
      if constexpr (std::is_same_v<Img, RgbImage>) {
        for (int c = 0; c < 3; ++c) padded.px(x, y)[c] = img.px(sx, sy)[c];
      } else {
        padded.at(x, y) = img.at(sx, sy);
      }
    }
  return padded;
}

template <typename Img>
Img random_crop_impl(const Img& img, int size, Rng& rng) {
  Img src = reflect_pad_to(img, size);
  const int rx = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(src.width - size + 1)));
  const int ry = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(src.height - size + 1)));
  return crop(src, rx, ry, size, size);
}

}  // namespace

GrayImage crop(const GrayImage& img, int x0, int y0, int w, int h) {
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

RgbImage crop(const RgbImage& img, int x0, int y0, int w, int h) {
  RgbImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.px(x, y)[c] = img.px(x0 + x, y0 + y)[c];
  return out;
}

BinaryImage crop(const BinaryImage& img, int x0, int y0, int w, int h) {
  BinaryImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.set(x, y, img.at(x0 + x, y0 + y));
  return out;
}

GrayImage random_crop(const GrayImage& img, int size, Rng& rng) { return random_crop_impl(img, size, rng); }
RgbImage random_crop(const RgbImage& img, int size, Rng& rng) { return random_crop_impl(img, size, rng); }

}  // namespace saghog
