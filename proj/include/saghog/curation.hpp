#pragma once

#include <optional>
#include <string>
#include <vector>

#include "saghog/image.hpp"

namespace saghog {

struct MaskCandidate {
  BinaryImage mask;   // true = proposed handwriting region
  double confidence = 0.0;
};

struct CurationRules {
  double min_confidence = 0.8;
  double min_edge_fraction = 0.10;  // edge pixels inside mask / mask pixels
  int max_masks = 2;
  int min_keypoints = 1000;
  bool require_mask = false;
};

// Keeps masks passing both thresholds; when more survive than the cap, the
// highest-confidence ones win (stable order on ties).
std::vector<MaskCandidate> filter_masks(const std::vector<MaskCandidate>& cands,
                                        const BinaryImage& edges, const CurationRules& rules = {});

struct PageRecord {
  std::string page_id;
  std::string writer_id;
  std::string path;
  bool admitted = false;
  std::optional<std::string> mask_path;
  int kp_count = 0;
  std::string split;  // "train" or "val"
  std::string error;  // non-empty when the page could not be processed
};

bool admit_page(const PageRecord& rec, int min_kps = 1000);

// Axis-aligned box with inclusive real-valued corners; width = x1 - x0.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

std::optional<Box> mask_to_bbox(const BinaryImage& mask);
double bbox_iou(const Box& a, const Box& b);

struct Manifest {
  std::vector<PageRecord> records;
  std::string config_hash;
  uint64_t seed = 0;
};

// Deterministic writer-level split: round(val_fraction * n_writers) validation
// writers, disjoint from training writers.
void assign_splits(Manifest& manifest, double val_fraction, uint64_t seed);

// JSON-lines manifest, one page per line, preceded by a header object
// carrying {config_hash, seed}.
void write_manifest(const std::string& path, const Manifest& manifest);
Manifest read_manifest(const std::string& path);

// Fraction of predicted boxes whose best IoU against the same page's ground
// truth reaches `threshold`.
struct BoxRecord {
  std::string page_id;
  Box box;
};
double iou_at(const std::vector<BoxRecord>& predicted, const std::vector<BoxRecord>& truth,
              double threshold = 0.5);

std::vector<BoxRecord> read_box_csv(const std::string& path);

}  // namespace saghog
