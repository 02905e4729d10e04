#include "saghog/curation.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "saghog/rng.hpp"
#include "json.hpp"

namespace saghog {

std::vector<MaskCandidate> filter_masks(const std::vector<MaskCandidate>& cands,
                                        const BinaryImage& edges, const CurationRules& rules) {
  std::vector<size_t> kept;
  for (size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    if (c.mask.width != edges.width || c.mask.height != edges.height)
      throw std::invalid_argument("filter_masks: mask/page shape mismatch");
    if (c.confidence < rules.min_confidence) continue;
    size_t mask_px = 0, edge_px = 0;
    for (size_t j = 0; j < c.mask.data.size(); ++j) {
      if (!c.mask.data[j]) continue;
      ++mask_px;
      edge_px += edges.data[j];
    }
    if (mask_px == 0) continue;
    const double edge_fraction = static_cast<double>(edge_px) / static_cast<double>(mask_px);
    if (edge_fraction < rules.min_edge_fraction) continue;
    kept.push_back(i);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [&](size_t a, size_t b) { return cands[a].confidence > cands[b].confidence; });
  if (kept.size() > static_cast<size_t>(rules.max_masks)) kept.resize(rules.max_masks);

  std::vector<MaskCandidate> out;
  out.reserve(kept.size());
  for (size_t i : kept) out.push_back(cands[i]);
  return out;
}

bool admit_page(const PageRecord& rec, int min_kps) { return rec.kp_count >= min_kps; }

std::optional<Box> mask_to_bbox(const BinaryImage& mask) {
  int minx = mask.width, miny = mask.height, maxx = -1, maxy = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        minx = std::min(minx, x);
        miny = std::min(miny, y);
        maxx = std::max(maxx, x);
        maxy = std::max(maxy, y);
      }
  if (maxx < 0) return std::nullopt;
  return Box{static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx),
             static_cast<double>(maxy)};
}

double bbox_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

void assign_splits(Manifest& manifest, double val_fraction, uint64_t seed) {
  std::vector<std::string> writers;
  for (const auto& r : manifest.records)
    if (std::find(writers.begin(), writers.end(), r.writer_id) == writers.end())
      writers.push_back(r.writer_id);
  std::sort(writers.begin(), writers.end());

  Rng rng(derive_seed(seed, 0x5b17));
  rng.shuffle(writers);
  const size_t n_val = static_cast<size_t>(std::lround(val_fraction * static_cast<double>(writers.size())));
  std::vector<std::string> val_writers(writers.begin(), writers.begin() + std::min(n_val, writers.size()));
  std::sort(val_writers.begin(), val_writers.end());

  for (auto& r : manifest.records) {
    const bool is_val = std::binary_search(val_writers.begin(), val_writers.end(), r.writer_id);
    r.split = is_val ? "val" : "train";
  }
  manifest.seed = seed;
}

void write_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  nlohmann::json header;
  header["config_hash"] = manifest.config_hash;
  header["seed"] = manifest.seed;
  out << header.dump() << "\n";
  for (const auto& r : manifest.records) {
    nlohmann::json j;
    j["page_id"] = r.page_id;
    j["writer_id"] = r.writer_id;
    j["path"] = r.path;
    j["admitted"] = r.admitted;
    if (r.mask_path) j["mask_path"] = *r.mask_path;
    j["kp_count"] = r.kp_count;
    j["split"] = r.split;
    if (!r.error.empty()) j["error"] = r.error;
    out << j.dump() << "\n";
  }
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  Manifest m;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first && !j.contains("page_id")) {
      m.config_hash = j.value("config_hash", "");
      m.seed = j.value("seed", 0ull);
      first = false;
      continue;
    }
    first = false;
    PageRecord r;
    r.page_id = j.at("page_id").get<std::string>();
    r.writer_id = j.at("writer_id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.admitted = j.at("admitted").get<bool>();
    if (j.contains("mask_path")) r.mask_path = j["mask_path"].get<std::string>();
    r.kp_count = j.at("kp_count").get<int>();
    r.split = j.value("split", "train");
    r.error = j.value("error", "");
    m.records.push_back(std::move(r));
  }
  return m;
}

double iou_at(const std::vector<BoxRecord>& predicted, const std::vector<BoxRecord>& truth,
              double threshold) {
  if (predicted.empty()) return 0.0;
  std::multimap<std::string, Box> gt;
  for (const auto& t : truth) gt.emplace(t.page_id, t.box);
  size_t hits = 0;
  for (const auto& p : predicted) {
    auto [lo, hi] = gt.equal_range(p.page_id);
    double best = 0.0;
    for (auto it = lo; it != hi; ++it) best = std::max(best, bbox_iou(p.box, it->second));
    if (best >= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::vector<BoxRecord> read_box_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_box_csv: cannot open " + path);
  std::vector<BoxRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    BoxRecord rec;
    std::getline(ss, rec.page_id, ',');
    if (rec.page_id == "page_id") continue;  // optional header row
    std::getline(ss, field, ',');
    rec.box.x0 = std::stod(field);
    std::getline(ss, field, ',');
    rec.box.y0 = std::stod(field);
    std::getline(ss, field, ',');
    rec.box.x1 = std::stod(field);
    std::getline(ss, field, ',');
    rec.box.y1 = std::stod(field);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace saghog
