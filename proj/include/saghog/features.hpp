#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "saghog/image.hpp"

namespace saghog {

struct Keypoint {
  double x = 0.0;      // subpixel column
  double y = 0.0;      // subpixel row
  double scale = 0.0;  // DoG scale in input-image units
  double response = 0.0;
};

struct SiftDescriptor {
  std::array<float, 128> values{};
};

// 8x8 grid of 9-bin orientation histograms for a 32x32 patch, cell size 4.
// Nonzero cells are unit length, empty cells stay all-zero.
struct HogGrid {
  static constexpr int kCells = 64;
  static constexpr int kBins = 9;
  std::array<std::array<float, kBins>, kCells> cells{};

  std::vector<float> flatten() const {
    std::vector<float> v;
    v.reserve(kCells * kBins);
    for (const auto& c : cells) v.insert(v.end(), c.begin(), c.end());
    return v;
  }
};

struct DetectorParams {
  int octaves = 3;
  int scales_per_octave = 3;
  double contrast_threshold = 0.04;  // on [0,1] intensities
  double edge_ratio = 10.0;
  double sigma = 1.6;
};

// Difference-of-Gaussians extrema on the binarized page, sorted by
// descending response (ties by y, x, scale for a reproducible order).
std::vector<Keypoint> detect_keypoints(const BinaryImage& img, const DetectorParams& params = {});

struct SiftParams {
  bool upright = true;  // no dominant-orientation assignment
  double magnification = 3.0;
  float clip = 0.2f;
};

// Standard 4x4x8 descriptor with trilinear interpolation, 0.2 clipping and
// renormalization. Returns nullopt when the scaled support window (plus the
// gradient margin) leaves the image.
std::optional<SiftDescriptor> sift_descriptor(const GrayImage& img, const Keypoint& kp,
                                              const SiftParams& params = {});

struct HogParams {
  int cell = 4;
  bool soft_binning = false;  // bilinear orientation vote instead of hard assignment
};

// Gradients from fixed [-1,0,1] kernels on the 0/1 image (replicate borders),
// unsigned orientation in [0,180) over 9 bins, magnitude-weighted votes,
// per-cell l2 normalization with a zero guard.
HogGrid hog_features(const BinaryImage& patch, const HogParams& params = {});

struct PatchProvenance {
  std::string page_id;
  int keypoint_index = -1;
};

// Keypoint-centered 32x32 binary patches. `origins` holds the top-left corner
// of each window so callers can cut the matching gray or color patch.
struct PatchBatch {
  std::vector<BinaryImage> patches;
  std::vector<PatchProvenance> prov;
  std::vector<std::pair<int, int>> origins;
  std::vector<int> labels;  // empty when unlabeled

  size_t size() const { return patches.size(); }
};

constexpr int kPatchSize = 32;

// Windows centered at rounded keypoint positions; windows leaving the image
// are skipped, patches with ink fraction < min_ink are discarded, and at most
// `limit` patches are kept in keypoint response order (0 = no limit).
PatchBatch sample_patches(const BinaryImage& img, const std::vector<Keypoint>& kps,
                          double min_ink = 0.01, size_t limit = 0,
                          const std::string& page_id = {});

// Descriptor dump: magic "SGHD", u32 count, u32 dim, row-major f32.
void write_sghd(const std::string& path, const std::vector<float>& rows, uint32_t count, uint32_t dim);
void read_sghd(const std::string& path, std::vector<float>& rows, uint32_t& count, uint32_t& dim);

}  // namespace saghog
