#pragma once

// Synthetic handwriting-like fixtures shared by the unit, CLI and acceptance
// suites. Each "writer" is a stroke-texture generator with its own slant,
// stroke width, curvature and spacing, drawn as dark anti-aliased strokes on
// a bright page arranged in text lines.

#include <cmath>
#include <string>
#include <vector>

#include "saghog/image.hpp"
#include "saghog/rng.hpp"

namespace synth {

struct WriterStyle {
  double slant;        // preferred stroke direction, radians
  double slant_jitter;
  double width;        // stroke thickness in pixels
  double curvature;    // direction drift per step
  double seg_len;      // stroke length in steps
  double density;      // strokes per text-line segment
};

inline WriterStyle writer_style(int writer) {
  saghog::Rng rng(saghog::derive_seed(0x57e1, static_cast<uint64_t>(writer)));
  WriterStyle s;
  s.slant = rng.uniform(-0.9, 0.9);
  s.slant_jitter = rng.uniform(0.06, 0.30);
  s.width = rng.uniform(1.8, 3.4);
  s.curvature = rng.uniform(-0.22, 0.22);
  s.seg_len = rng.uniform(9.0, 22.0);
  s.density = rng.uniform(0.7, 1.3);
  return s;
}

// Soft-brush disc stamp.
inline void stamp(saghog::GrayImage& img, double cx, double cy, double radius, int ink) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d > radius + 0.5) continue;
      const double a = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      auto& px = img.at(x, y);
      const int v = static_cast<int>(px * (1.0 - a) + ink * a);
      px = static_cast<uint8_t>(std::min<int>(px, v));
    }
}

inline void draw_stroke(saghog::GrayImage& img, saghog::Rng& rng, const WriterStyle& st, double x,
                        double y) {
  double dir = st.slant + rng.normal(0.0, st.slant_jitter);
  const int steps = std::max(4, static_cast<int>(st.seg_len * rng.uniform(0.7, 1.3)));
  const int ink = 30 + static_cast<int>(rng.uniform_below(30));
  for (int i = 0; i < steps; ++i) {
    stamp(img, x, y, st.width * 0.5 * rng.uniform(0.95, 1.05), ink);
    x += std::cos(dir);
    y += std::sin(dir);
    dir += st.curvature * 0.3 + rng.normal(0.0, 0.02);
    if (x < 2 || x >= img.width - 2 || y < 2 || y >= img.height - 2) break;
  }
}

inline saghog::GrayImage make_page(int writer, int page, int size = 384) {
  const WriterStyle st = writer_style(writer);
  saghog::Rng rng(saghog::derive_seed(0x9A6E, static_cast<uint64_t>(writer),
                                      static_cast<uint64_t>(page)));
  saghog::GrayImage img(size, size, 235);
  // paper texture
  for (auto& px : img.data)
    px = static_cast<uint8_t>(std::clamp(px + static_cast<int>(rng.normal(0.0, 2.0)), 205, 255));

  const int line_step = 26;
  for (int baseline = line_step; baseline < size - 8; baseline += line_step) {
    double x = 6.0 + rng.uniform(0.0, 8.0);
    while (x < size - 10) {
      const int strokes = 1 + static_cast<int>(rng.uniform_below(3));
      for (int s = 0; s < strokes * st.density; ++s) {
        const double sx = x + rng.uniform(-3.0, 3.0);
        const double sy = baseline + rng.normal(0.0, 5.0);
        draw_stroke(img, rng, st, sx, sy);
      }
      x += rng.uniform(9.0, 18.0) / st.density;
      if (rng.bernoulli(0.12)) x += rng.uniform(8.0, 16.0);  // word gap
    }
  }
  return img;
}

inline std::string page_id(int writer, int page) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "w%02d-p%d", writer, page);
  return buf;
}

}  // namespace synth
