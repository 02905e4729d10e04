#include <array>
#include <map>
#include <cmath>
#include <set>

#include "doctest.h"
#include "saghog/image.hpp"

using namespace saghog;

namespace {

// Exhaustive per-threshold between-class variance search, double arithmetic.
int otsu_oracle(const std::array<uint64_t, 256>& hist) {
  int best_t = 0;
  double best = -1.0;
  for (int t = 0; t < 256; ++t) {
    double w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (int i = 0; i < t; ++i) {
      w0 += static_cast<double>(hist[i]);
      s0 += static_cast<double>(i) * static_cast<double>(hist[i]);
    }
    for (int i = t; i < 256; ++i) {
      w1 += static_cast<double>(hist[i]);
      s1 += static_cast<double>(i) * static_cast<double>(hist[i]);
    }
    if (w0 == 0 || w1 == 0) continue;
    const double mu0 = s0 / w0, mu1 = s1 / w1;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best) {
      best = var;
      best_t = t;
    }
  }
  return best < 0 ? 0 : best_t;
}

// Naive windowed Sauvola with replicated borders.
BinaryImage sauvola_oracle(const GrayImage& img, int window, double k, double r) {
  const int half = window / 2;
  BinaryImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double sum = 0, sq = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          const double v = img.at_clamped(x + dx, y + dy);
          sum += v;
          sq += v * v;
        }
      const double n = static_cast<double>(window) * window;
      const double mean = sum / n;
      const double stddev = std::sqrt(std::max(0.0, sq / n - mean * mean));
      const double t = mean * (1.0 + k * (stddev / r - 1.0));
      out.set(x, y, img.at(x, y) < t);
    }
  return out;
}

// Set-definition morphology: dilation as union of translates, erosion as the
// all-offsets-inside test.
BinaryImage morph_oracle(const BinaryImage& img, const Kernel3& kern, MorphMode mode) {
  BinaryImage out(img.width, img.height);
  if (mode == MorphMode::Dilate) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        if (!img.at(x, y)) continue;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if (kern[(dy + 1) * 3 + dx + 1] && img.in_bounds(x + dx, y + dy))
              out.set(x + dx, y + dy, true);
      }
  } else {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        bool all = true;
        for (int dy = -1; dy <= 1 && all; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if (kern[(dy + 1) * 3 + dx + 1] &&
                (!img.in_bounds(x + dx, y + dy) || !img.at(x + dx, y + dy))) {
              all = false;
              break;
            }
        out.set(x, y, all);
      }
  }
  return out;
}

GrayImage random_gray(int w, int h, Rng& rng) {
  GrayImage img(w, h);
  for (auto& v : img.data) v = static_cast<uint8_t>(rng.uniform_below(256));
  return img;
}

BinaryImage random_binary(int w, int h, Rng& rng, double p = 0.5) {
  BinaryImage img(w, h);
  for (auto& v : img.data) v = rng.bernoulli(p) ? 1 : 0;
  return img;
}

// Regularized upper incomplete gamma Q(a, x) for the chi-square p-value.
double gamma_q(double a, double x) {
  if (x < a + 1.0) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n < 500; ++n) {
      term *= x / (a + n);
      sum += term;
      if (term < sum * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
  }
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

double chi_square_p(const std::vector<double>& observed, double expected_per_cell) {
  double stat = 0.0;
  for (double o : observed) {
    const double d = o - expected_per_cell;
    stat += d * d / expected_per_cell;
  }
  return gamma_q(0.5 * (observed.size() - 1), 0.5 * stat);
}

}  // namespace

TEST_CASE("to_gray basics") {
  RgbImage img(2, 2);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) img.data[3 * i + c] = 128;
  auto g = to_gray(img);
  for (auto v : g.data) CHECK(v == 128);

  RgbImage red(1, 1);
  red.data = {255, 0, 0};
  CHECK(to_gray(red).data[0] == 76);  // round(0.299 * 255)

  // already-gray RGB stays identical
  Rng rng(1);
  RgbImage gray_rgb(5, 7);
  for (int i = 0; i < 35; ++i) {
    const uint8_t v = static_cast<uint8_t>(rng.uniform_below(256));
    gray_rgb.data[3 * i] = gray_rgb.data[3 * i + 1] = gray_rgb.data[3 * i + 2] = v;
  }
  const auto g2 = to_gray(gray_rgb);
  for (int i = 0; i < 35; ++i) CHECK(g2.data[i] == gray_rgb.data[3 * i]);
}

TEST_CASE("otsu on degenerate and bimodal images") {
  GrayImage constant(8, 8, 77);
  const auto all_bg = binarize_otsu(constant);
  CHECK(all_bg.ink_count() == 0);

  GrayImage bimodal(4, 4);
  for (int i = 0; i < 8; ++i) bimodal.data[i] = 0;
  for (int i = 8; i < 16; ++i) bimodal.data[i] = 255;
  const auto split = binarize_otsu(bimodal);
  for (int i = 0; i < 8; ++i) CHECK(split.data[i] == 1);
  for (int i = 8; i < 16; ++i) CHECK(split.data[i] == 0);
}

TEST_CASE("otsu equals the exhaustive variance search on random histograms") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    std::array<uint64_t, 256> hist{};
    // mixture of two lumps plus uniform noise, occasionally sparse
    const int modes = 1 + static_cast<int>(rng.uniform_below(3));
    for (int m = 0; m < modes; ++m) {
      const int center = static_cast<int>(rng.uniform_below(256));
      const int spread = 1 + static_cast<int>(rng.uniform_below(40));
      const int mass = 50 + static_cast<int>(rng.uniform_below(1000));
      for (int i = 0; i < mass; ++i) {
        const int v = std::clamp(center + static_cast<int>(std::lround(rng.normal(0, spread))), 0, 255);
        ++hist[v];
      }
    }
    for (int i = 0; i < 30; ++i) ++hist[rng.uniform_below(256)];
    CHECK(otsu_threshold(hist) == otsu_oracle(hist));
  }
}

TEST_CASE("binarization idempotence on two-valued images") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    GrayImage img(40, 40);
    bool has0 = false, has255 = false;
    for (auto& v : img.data) {
      v = rng.bernoulli(0.5) ? 0 : 255;
      (v == 0 ? has0 : has255) = true;
    }
    if (!has0 || !has255) continue;
    const auto bin = binarize_otsu(img);
    for (size_t i = 0; i < img.size(); ++i) CHECK(bin.data[i] == (img.data[i] == 0 ? 1 : 0));
  }
}

TEST_CASE("sauvola constant image is all background") {
  GrayImage constant(30, 30, 120);
  CHECK(binarize_sauvola(constant).ink_count() == 0);
}

TEST_CASE("sauvola matches the naive windowed oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    const auto img = random_gray(47, 31, rng);
    const auto fast = binarize_sauvola(img);
    const auto slow = sauvola_oracle(img, 25, 0.2, 128.0);
    CHECK(fast == slow);
  }
  // window larger than the image clamps to the image extent
  const auto small = random_gray(9, 9, rng);
  const auto fast = binarize_sauvola(small, {25, 0.2, 128.0});
  const auto slow = sauvola_oracle(small, 9, 0.2, 128.0);
  CHECK(fast == slow);
}

TEST_CASE("sauvola recovers a stroke on an illumination gradient where otsu fails") {
  GrayImage img(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) img.at(x, y) = static_cast<uint8_t>(60 + (195 * x) / 63);
  // dark stroke relative to its surroundings on the bright side
  for (int y = 20; y < 44; ++y)
    for (int x = 56; x < 60; ++x) img.at(x, y) = static_cast<uint8_t>(img.at(x, y) - 60);

  const auto sauvola = binarize_sauvola(img);
  const auto otsu = binarize_otsu(img);
  int sauvola_hits = 0, otsu_hits = 0;
  for (int y = 20; y < 44; ++y)
    for (int x = 56; x < 60; ++x) {
      sauvola_hits += sauvola.at(x, y);
      otsu_hits += otsu.at(x, y);
    }
  CHECK(sauvola_hits > 90);  // 96 stroke pixels
  CHECK(otsu_hits == 0);     // global threshold swallows the bright side
}

TEST_CASE("morphology basics") {
  Kernel3 full;
  full.fill(true);
  BinaryImage img(7, 7);
  img.set(3, 3, true);

  const auto grown = morph(img, full, MorphMode::Dilate);
  CHECK(grown.ink_count() == 9);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) CHECK(grown.at(3 + dx, 3 + dy));

  CHECK(morph(img, full, MorphMode::Erode).ink_count() == 0);

  Kernel3 empty{};
  CHECK_THROWS_AS(morph(img, empty, MorphMode::Dilate), std::invalid_argument);
}

TEST_CASE("morphology equals the set-definition oracle on random images") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const auto img = random_binary(32, 32, rng, 0.3);
    Kernel3 kern{};
    bool any = false;
    for (auto& c : kern) {
      c = rng.bernoulli(0.5);
      any = any || c;
    }
    if (!any) kern[4] = true;
    for (auto mode : {MorphMode::Erode, MorphMode::Dilate})
      CHECK(morph(img, kern, mode) == morph_oracle(img, kern, mode));
  }
}

TEST_CASE("morphological duality away from the canvas border") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    // embed in a background margin so complementation is exact on the interior
    BinaryImage canvas(36, 36);
    const auto inner = random_binary(32, 32, rng, 0.4);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) canvas.set(x + 2, y + 2, inner.at(x, y));

    Kernel3 kern{};
    bool any = false;
    for (auto& c : kern) {
      c = rng.bernoulli(0.5);
      any = any || c;
    }
    if (!any) kern[4] = true;
    Kernel3 reflected;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        reflected[(1 - dy) * 3 + (1 - dx)] = kern[(dy + 1) * 3 + (dx + 1)];

    BinaryImage complement(canvas.width, canvas.height);
    for (size_t i = 0; i < canvas.data.size(); ++i) complement.data[i] = canvas.data[i] ? 0 : 1;

    const auto eroded = morph(canvas, kern, MorphMode::Erode);
    const auto dual = morph(complement, reflected, MorphMode::Dilate);
    for (int y = 2; y < 34; ++y)
      for (int x = 2; x < 34; ++x) CHECK(eroded.at(x, y) == !dual.at(x, y));
  }
}

TEST_CASE("canny edge map") {
  GrayImage constant(40, 40, 200);
  CHECK(edge_map(constant).ink_count() == 0);

  // vertical step edge: single-pixel-wide response within 1 px of the step
  GrayImage step(40, 40);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) step.at(x, y) = x < 20 ? 0 : 255;
  const auto edges = edge_map(step);
  for (int y = 5; y < 35; ++y) {
    int count = 0, pos = -1;
    for (int x = 0; x < 40; ++x)
      if (edges.at(x, y)) {
        ++count;
        pos = x;
      }
    CHECK(count == 1);
    CHECK(std::abs(pos - 20) <= 1);
  }

  // sub-threshold impulse stays silent
  GrayImage impulse(21, 21, 128);
  impulse.at(10, 10) = 131;
  CHECK(edge_map(impulse).ink_count() == 0);
}

TEST_CASE("random_crop identity, determinism and uniformity") {
  Rng rng(5);
  const auto img = random_gray(256, 256, rng);
  Rng crop_rng(99);
  const auto same = random_crop(img, 256, crop_rng);
  CHECK(same.data == img.data);

  const auto big = random_gray(512, 512, rng);
  Rng r1(123), r2(123);
  CHECK(random_crop(big, 256, r1).data == random_crop(big, 256, r2).data);

  // offsets uniform over the 45x45 grid; recover each crop's origin by
  // fingerprinting the first 8 bytes of every possible window
  const auto mid = random_gray(300, 300, rng);
  std::map<uint64_t, std::pair<int, int>> origin_of;
  for (int oy = 0; oy < 45; ++oy)
    for (int ox = 0; ox < 45; ++ox) {
      uint64_t key = 0;
      for (int i = 0; i < 8; ++i) key = key << 8 | mid.at(ox + i, oy);
      origin_of[key] = {ox, oy};
    }
  REQUIRE(origin_of.size() == 45u * 45u);  // fingerprints are unique
  Rng r3(2024);
  std::vector<double> counts(45 * 45, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto cropped = random_crop(mid, 256, r3);
    uint64_t key = 0;
    for (int b = 0; b < 8; ++b) key = key << 8 | cropped.at(b, 0);
    const auto it = origin_of.find(key);
    REQUIRE(it != origin_of.end());
    counts[it->second.second * 45 + it->second.first] += 1.0;
  }
  const double p = chi_square_p(counts, static_cast<double>(draws) / counts.size());
  CHECK(p > 0.01);

  // undersized input is reflect-padded to the crop size
  const auto tiny = random_gray(100, 80, rng);
  Rng r4(7);
  const auto padded = random_crop(tiny, 128, r4);
  CHECK(padded.width == 128);
  CHECK(padded.height == 128);
}

TEST_CASE("imaging operations are pure") {
  Rng rng(17);
  const auto img = random_gray(50, 50, rng);
  CHECK(binarize_otsu(img) == binarize_otsu(img));
  CHECK(binarize_sauvola(img) == binarize_sauvola(img));
  CHECK(edge_map(img) == edge_map(img));
}
