#include "saghog/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace saghog {

namespace {

struct FloatImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  FloatImage() = default;
  FloatImage(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h, 0.f) {}
  float at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  float& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
};

FloatImage gaussian_blur(const FloatImage& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    kernel[i + radius] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : kernel) v = static_cast<float>(v / sum);

  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  FloatImage tmp(src.width, src.height), out(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      float acc = 0.f;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[i + radius] * src.at(clampi(x + i, src.width - 1), y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      float acc = 0.f;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[i + radius] * tmp.at(x, clampi(y + i, src.height - 1));
      out.at(x, y) = acc;
    }
  return out;
}

FloatImage downsample2(const FloatImage& src) {
  FloatImage out(std::max(1, src.width / 2), std::max(1, src.height / 2));
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(x, y) = src.at(x * 2, y * 2);
  return out;
}

// Solve the 3x3 system H*x = -g for the subpixel offset (Cramer's rule).
bool solve3(const double h[3][3], const double g[3], double out[3]) {
  const double det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1]) -
                     h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0]) +
                     h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
  if (std::abs(det) < 1e-12) return false;
  auto det3 = [](double a, double b, double c, double d, double e, double f, double g2, double h2,
                 double i) { return a * (e * i - f * h2) - b * (d * i - f * g2) + c * (d * h2 - e * g2); };
  out[0] = det3(-g[0], h[0][1], h[0][2], -g[1], h[1][1], h[1][2], -g[2], h[2][1], h[2][2]) / det;
  out[1] = det3(h[0][0], -g[0], h[0][2], h[1][0], -g[1], h[1][2], h[2][0], -g[2], h[2][2]) / det;
  out[2] = det3(h[0][0], h[0][1], -g[0], h[1][0], h[1][1], -g[1], h[2][0], h[2][1], -g[2]) / det;
  return true;
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const BinaryImage& img, const DetectorParams& params) {
  const int ns = params.scales_per_octave;
  const int levels = ns + 3;
  constexpr int kBorder = 4;

  FloatImage base(img.width, img.height);
  for (size_t i = 0; i < img.data.size(); ++i) base.data[i] = img.data[i] ? 1.f : 0.f;
  // Bring the raw image (nominal sigma 0.5) up to the base blur level.
  const double sigma_init = 0.5;
  base = gaussian_blur(base, std::sqrt(std::max(0.0, params.sigma * params.sigma - sigma_init * sigma_init)));

  std::vector<double> level_sigma(levels);
  for (int s = 0; s < levels; ++s) level_sigma[s] = params.sigma * std::pow(2.0, static_cast<double>(s) / ns);

  std::vector<Keypoint> kps;
  FloatImage octave_base = std::move(base);
  for (int o = 0; o < params.octaves; ++o) {
    if (octave_base.width < 2 * kBorder + 3 || octave_base.height < 2 * kBorder + 3) break;
    std::vector<FloatImage> gauss(levels);
    gauss[0] = octave_base;
    for (int s = 1; s < levels; ++s) {
      const double diff = std::sqrt(level_sigma[s] * level_sigma[s] - level_sigma[s - 1] * level_sigma[s - 1]);
      gauss[s] = gaussian_blur(gauss[s - 1], diff);
    }
    std::vector<FloatImage> dog(levels - 1);
    for (int s = 0; s < levels - 1; ++s) {
      dog[s] = FloatImage(octave_base.width, octave_base.height);
      for (size_t i = 0; i < dog[s].data.size(); ++i) dog[s].data[i] = gauss[s + 1].data[i] - gauss[s].data[i];
    }

    const double prelim_thresh = 0.5 * params.contrast_threshold / ns;
    const int w = octave_base.width, h = octave_base.height;
    for (int s = 1; s <= ns; ++s) {
      for (int y = kBorder; y < h - kBorder; ++y) {
        for (int x = kBorder; x < w - kBorder; ++x) {
          const float v = dog[s].at(x, y);
          if (std::abs(v) <= prelim_thresh) continue;
          bool is_max = v > 0, is_min = v < 0;
          for (int ds = -1; ds <= 1 && (is_max || is_min); ++ds)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                if (ds == 0 && dy == 0 && dx == 0) continue;
                const float nb = dog[s + ds].at(x + dx, y + dy);
                if (v < nb) is_max = false;
                if (v > nb) is_min = false;
              }
          if (!is_max && !is_min) continue;

          // Quadratic refinement in (x, y, s); re-localize when the offset
          // leaves the center cell.
          int cx = x, cy = y, cs = s;
          double offset[3] = {0, 0, 0};
          double contrast = 0.0;
          bool converged = false;
          for (int iter = 0; iter < 5; ++iter) {
            const auto& d0 = dog[cs - 1];
            const auto& d1 = dog[cs];
            const auto& d2 = dog[cs + 1];
            const double dx1 = 0.5 * (d1.at(cx + 1, cy) - d1.at(cx - 1, cy));
            const double dy1 = 0.5 * (d1.at(cx, cy + 1) - d1.at(cx, cy - 1));
            const double ds1 = 0.5 * (d2.at(cx, cy) - d0.at(cx, cy));
            const double c = d1.at(cx, cy);
            const double dxx = d1.at(cx + 1, cy) + d1.at(cx - 1, cy) - 2 * c;
            const double dyy = d1.at(cx, cy + 1) + d1.at(cx, cy - 1) - 2 * c;
            const double dss = d2.at(cx, cy) + d0.at(cx, cy) - 2 * c;
            const double dxy = 0.25 * (d1.at(cx + 1, cy + 1) - d1.at(cx - 1, cy + 1) -
                                       d1.at(cx + 1, cy - 1) + d1.at(cx - 1, cy - 1));
            const double dxs = 0.25 * (d2.at(cx + 1, cy) - d2.at(cx - 1, cy) -
                                       d0.at(cx + 1, cy) + d0.at(cx - 1, cy));
            const double dys = 0.25 * (d2.at(cx, cy + 1) - d2.at(cx, cy - 1) -
                                       d0.at(cx, cy + 1) + d0.at(cx, cy - 1));
            const double hess[3][3] = {{dxx, dxy, dxs}, {dxy, dyy, dys}, {dxs, dys, dss}};
            const double grad[3] = {dx1, dy1, ds1};
            if (!solve3(hess, grad, offset)) break;
            if (std::abs(offset[0]) < 0.5 && std::abs(offset[1]) < 0.5 && std::abs(offset[2]) < 0.5) {
              contrast = c + 0.5 * (dx1 * offset[0] + dy1 * offset[1] + ds1 * offset[2]);
              converged = true;
              break;
            }
            cx += static_cast<int>(std::lround(offset[0]));
            cy += static_cast<int>(std::lround(offset[1]));
            cs += static_cast<int>(std::lround(offset[2]));
            if (cs < 1 || cs > ns || cx < kBorder || cx >= w - kBorder || cy < kBorder ||
                cy >= h - kBorder)
              break;
          }
          if (!converged) continue;
          if (std::abs(contrast) * ns < params.contrast_threshold) continue;

          // Edge response: ratio of principal curvatures of the 2x2 Hessian.
          const auto& d1 = dog[cs];
          const double c = d1.at(cx, cy);
          const double dxx = d1.at(cx + 1, cy) + d1.at(cx - 1, cy) - 2 * c;
          const double dyy = d1.at(cx, cy + 1) + d1.at(cx, cy - 1) - 2 * c;
          const double dxy = 0.25 * (d1.at(cx + 1, cy + 1) - d1.at(cx - 1, cy + 1) -
                                     d1.at(cx + 1, cy - 1) + d1.at(cx - 1, cy - 1));
          const double tr = dxx + dyy;
          const double det = dxx * dyy - dxy * dxy;
          const double r = params.edge_ratio;
          if (det <= 0.0 || tr * tr * r >= (r + 1) * (r + 1) * det) continue;

          const double scale_mult = std::pow(2.0, static_cast<double>(o));
          Keypoint kp;
          kp.x = (cx + offset[0]) * scale_mult;
          kp.y = (cy + offset[1]) * scale_mult;
          kp.scale = params.sigma * std::pow(2.0, (cs + offset[2]) / ns) * scale_mult;
          kp.response = std::abs(contrast);
          if (kp.x < 0 || kp.x > img.width - 1 || kp.y < 0 || kp.y > img.height - 1) continue;
          kps.push_back(kp);
        }
      }
    }
    octave_base = downsample2(gauss[ns]);
  }

  std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.scale < b.scale;
  });
  return kps;
}

std::optional<SiftDescriptor> sift_descriptor(const GrayImage& img, const Keypoint& kp,
                                              const SiftParams& params) {
  constexpr int kD = 4;  // spatial cells per side
  constexpr int kN = 8;  // orientation bins
  const double hist_width = params.magnification * std::max(kp.scale, 0.5);
  const int radius = static_cast<int>(std::lround(hist_width * (kD + 1) * 0.5));
  const int cx = static_cast<int>(std::lround(kp.x));
  const int cy = static_cast<int>(std::lround(kp.y));
  // Support window plus a 1 px margin for central differences must fit.
  if (cx - radius - 1 < 0 || cx + radius + 1 >= img.width || cy - radius - 1 < 0 ||
      cy + radius + 1 >= img.height)
    return std::nullopt;

  // (d+2)^2 x (n+2) raw histogram; spatial rim and orientation wrap folded in
  // after accumulation.
  std::array<double, (kD + 2) * (kD + 2) * (kN + 2)> hist{};
  const double bins_per_rad = kN / (2.0 * M_PI);
  const double exp_denom = kD * kD * 0.5;

  for (int i = -radius; i <= radius; ++i) {
    for (int j = -radius; j <= radius; ++j) {
      const double r_bin = i / hist_width + kD / 2 - 0.5;
      const double c_bin = j / hist_width + kD / 2 - 0.5;
      if (r_bin <= -1 || r_bin >= kD || c_bin <= -1 || c_bin >= kD) continue;
      const int px = cx + j, py = cy + i;
      const double dx = static_cast<double>(img.at(px + 1, py)) - img.at(px - 1, py);
      const double dy = static_cast<double>(img.at(px, py + 1)) - img.at(px, py - 1);
      const double mag = std::sqrt(dx * dx + dy * dy);
      if (mag == 0.0) continue;
      double theta = std::atan2(dy, dx);
      if (theta < 0) theta += 2.0 * M_PI;
      const double o_bin = theta * bins_per_rad;
      const double wgt =
          std::exp(-((i / hist_width) * (i / hist_width) + (j / hist_width) * (j / hist_width)) / exp_denom);

      int r0 = static_cast<int>(std::floor(r_bin));
      int c0 = static_cast<int>(std::floor(c_bin));
      int o0 = static_cast<int>(std::floor(o_bin));
      const double rf = r_bin - r0, cf = c_bin - c0, of = o_bin - o0;
      const double v = mag * wgt;
      for (int dr = 0; dr <= 1; ++dr)
        for (int dc = 0; dc <= 1; ++dc)
          for (int dob = 0; dob <= 1; ++dob) {
            const double wv = v * (dr ? rf : 1 - rf) * (dc ? cf : 1 - cf) * (dob ? of : 1 - of);
            const int rr = r0 + dr + 1, cc = c0 + dc + 1;
            const int oo = (o0 + dob) % kN;
            hist[(static_cast<size_t>(rr) * (kD + 2) + cc) * (kN + 2) + oo] += wv;
          }
    }
  }

  SiftDescriptor desc;
  double norm_sq = 0.0;
  for (int r = 0; r < kD; ++r)
    for (int c = 0; c < kD; ++c)
      for (int o = 0; o < kN; ++o) {
        const double v = hist[(static_cast<size_t>(r + 1) * (kD + 2) + c + 1) * (kN + 2) + o];
        desc.values[(r * kD + c) * kN + o] = static_cast<float>(v);
        norm_sq += v * v;
      }
  if (norm_sq < 1e-12) return desc;  // flat support: all-zero by contract

  float norm = static_cast<float>(std::sqrt(norm_sq));
  for (auto& v : desc.values) v = std::min(v / norm, params.clip);
  norm_sq = 0.0;
  for (auto v : desc.values) norm_sq += static_cast<double>(v) * v;
  norm = static_cast<float>(std::sqrt(norm_sq));
  for (auto& v : desc.values) v /= norm;
  return desc;
}

HogGrid hog_features(const BinaryImage& patch, const HogParams& params) {
  if (patch.width != kPatchSize || patch.height != kPatchSize)
    throw std::invalid_argument("hog_features: patch must be 32x32");
  const int cell = params.cell;
  const int grid = kPatchSize / cell;  // 8

  auto val = [&](int x, int y) {
    x = std::clamp(x, 0, patch.width - 1);
    y = std::clamp(y, 0, patch.height - 1);
    return patch.at(x, y) ? 1.f : 0.f;
  };

  HogGrid out;
  constexpr double kBinWidth = M_PI / HogGrid::kBins;
  for (int y = 0; y < kPatchSize; ++y) {
    for (int x = 0; x < kPatchSize; ++x) {
      const float gx = val(x + 1, y) - val(x - 1, y);
      const float gy = val(x, y + 1) - val(x, y - 1);
      const float mag = std::sqrt(gx * gx + gy * gy);
      if (mag == 0.f) continue;
      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += M_PI;
      if (theta >= M_PI) theta -= M_PI;
      const int cell_idx = (y / cell) * grid + (x / cell);
      if (!params.soft_binning) {
        const int bin = std::min(static_cast<int>(theta / kBinWidth), HogGrid::kBins - 1);
        out.cells[cell_idx][bin] += mag;
      } else {
        const double pos = theta / kBinWidth - 0.5;
        int b0 = static_cast<int>(std::floor(pos));
        const double f = pos - b0;
        b0 = (b0 + HogGrid::kBins) % HogGrid::kBins;
        const int b1 = (b0 + 1) % HogGrid::kBins;
        out.cells[cell_idx][b0] += static_cast<float>(mag * (1.0 - f));
        out.cells[cell_idx][b1] += static_cast<float>(mag * f);
      }
    }
  }

  for (auto& c : out.cells) {
    double norm_sq = 0.0;
    for (float v : c) norm_sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-6) {
      c.fill(0.f);
    } else {
      for (auto& v : c) v = static_cast<float>(v / norm);
    }
  }
  return out;
}

PatchBatch sample_patches(const BinaryImage& img, const std::vector<Keypoint>& kps, double min_ink,
                          size_t limit, const std::string& page_id) {
  // Index keypoints in response order without disturbing caller indices.
  std::vector<int> order(kps.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return kps[a].response > kps[b].response;
  });

  PatchBatch batch;
  const int half = kPatchSize / 2;
  for (int idx : order) {
    if (limit > 0 && batch.size() >= limit) break;
    const auto& kp = kps[idx];
    const int cx = static_cast<int>(std::lround(kp.x));
    const int cy = static_cast<int>(std::lround(kp.y));
    const int x0 = cx - half, y0 = cy - half;
    if (x0 < 0 || y0 < 0 || x0 + kPatchSize > img.width || y0 + kPatchSize > img.height) continue;
    BinaryImage patch = crop(img, x0, y0, kPatchSize, kPatchSize);
    const double ink = static_cast<double>(patch.ink_count()) / (kPatchSize * kPatchSize);
    if (ink < min_ink) continue;
    batch.patches.push_back(std::move(patch));
    batch.prov.push_back({page_id, idx});
    batch.origins.emplace_back(x0, y0);
  }
  return batch;
}

void write_sghd(const std::string& path, const std::vector<float>& rows, uint32_t count, uint32_t dim) {
  if (rows.size() != static_cast<size_t>(count) * dim)
    throw std::invalid_argument("write_sghd: row buffer does not match count*dim");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_sghd: cannot open " + path);
  out.write("SGHD", 4);
  out.write(reinterpret_cast<const char*>(&count), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(rows.size() * 4));
  if (!out) throw std::runtime_error("write_sghd: write failed for " + path);
}

void read_sghd(const std::string& path, std::vector<float>& rows, uint32_t& count, uint32_t& dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_sghd: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SGHD", 4) != 0)
    throw std::runtime_error("read_sghd: bad magic in " + path);
  in.read(reinterpret_cast<char*>(&count), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  rows.resize(static_cast<size_t>(count) * dim);
  in.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(rows.size() * 4));
  if (!in) throw std::runtime_error("read_sghd: truncated payload in " + path);
}

}  // namespace saghog
