#include <filesystem>
#include <set>

#include "doctest.h"
#include "saghog/curation.hpp"
#include "saghog/rng.hpp"
#include <fstream>

using namespace saghog;

namespace {

// Page-sized mask with a filled rectangle.
MaskCandidate rect_mask(int w, int h, int x0, int y0, int x1, int y1, double conf) {
  MaskCandidate c;
  c.mask = BinaryImage(w, h);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) c.mask.set(x, y, true);
  c.confidence = conf;
  return c;
}

}  // namespace

TEST_CASE("filter_masks thresholds and cap") {
  const int w = 40, h = 40;
  // edges cover the left half densely
  BinaryImage edges(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < 20; ++x)
      if ((x + y) % 2 == 0) edges.set(x, y, true);  // 50% edge fraction inside left masks

  SUBCASE("confidence boundary: 0.79 rejected, 0.80 kept") {
    const auto low = filter_masks({rect_mask(w, h, 0, 0, 19, 39, 0.79)}, edges);
    CHECK(low.empty());
    const auto ok = filter_masks({rect_mask(w, h, 0, 0, 19, 39, 0.80)}, edges);
    CHECK(ok.size() == 1);
  }

  SUBCASE("blank-margin mask with 2% edge fraction is rejected") {
    // right-half mask: almost no edges inside
    BinaryImage sparse_edges(w, h);
    for (int i = 0; i < 16; ++i) sparse_edges.set(21 + i % 19, 1 + i, true);  // 16 / 800 = 2%
    const auto rejected = filter_masks({rect_mask(w, h, 20, 0, 39, 39, 0.95)}, sparse_edges);
    CHECK(rejected.empty());
  }

  SUBCASE("edge fraction boundary at exactly 10%") {
    BinaryImage ten(w, h);
    // mask of 800 px; 80 edge pixels inside = exactly 0.10
    for (int i = 0; i < 80; ++i) ten.set(i % 20, i / 20, true);
    const auto kept = filter_masks({rect_mask(w, h, 0, 0, 19, 39, 0.9)}, ten);
    CHECK(kept.size() == 1);
    // one edge pixel fewer drops below the threshold
    BinaryImage nine(w, h);
    for (int i = 0; i < 79; ++i) nine.set(i % 20, i / 20, true);
    CHECK(filter_masks({rect_mask(w, h, 0, 0, 19, 39, 0.9)}, nine).empty());
  }

  SUBCASE("four passing masks keep the top two by confidence") {
    std::vector<MaskCandidate> cands = {
        rect_mask(w, h, 0, 0, 19, 39, 0.95), rect_mask(w, h, 0, 0, 19, 39, 0.90),
        rect_mask(w, h, 0, 0, 19, 39, 0.85), rect_mask(w, h, 0, 0, 19, 39, 0.81)};
    const auto kept = filter_masks(cands, edges);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].confidence == 0.95);
    CHECK(kept[1].confidence == 0.90);
  }

  SUBCASE("filtering is monotone in confidence") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const double conf = 0.8 + 0.19 * rng.uniform();
      auto cand = rect_mask(w, h, 0, 0, 19, 39, conf);
      const bool kept = !filter_masks({cand}, edges).empty();
      cand.confidence = std::min(1.0, conf + rng.uniform() * (1.0 - conf));
      const bool kept_higher = !filter_masks({cand}, edges).empty();
      if (kept) CHECK(kept_higher);
    }
  }
}

TEST_CASE("admission boundary is >=, not >") {
  PageRecord rec;
  rec.kp_count = 999;
  CHECK(!admit_page(rec, 1000));
  rec.kp_count = 1000;
  CHECK(admit_page(rec, 1000));
}

TEST_CASE("mask_to_bbox") {
  BinaryImage empty(10, 10);
  CHECK(!mask_to_bbox(empty).has_value());

  BinaryImage single(16, 12);
  single.set(7, 3, true);
  const auto box = mask_to_bbox(single);
  REQUIRE(box.has_value());
  CHECK(box->x0 == 7);
  CHECK(box->y0 == 3);
  CHECK(box->x1 == 7);
  CHECK(box->y1 == 3);

  BinaryImage full(8, 9, true);
  const auto fb = mask_to_bbox(full);
  CHECK(fb->x0 == 0);
  CHECK(fb->y0 == 0);
  CHECK(fb->x1 == 7);
  CHECK(fb->y1 == 8);

  // two blobs: box spans both, verified by exhaustive scan
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    BinaryImage blobs(32, 32);
    for (int i = 0; i < 2; ++i) {
      const int cx = 4 + static_cast<int>(rng.uniform_below(24));
      const int cy = 4 + static_cast<int>(rng.uniform_below(24));
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) blobs.set(cx + dx, cy + dy, true);
    }
    const auto b = mask_to_bbox(blobs);
    REQUIRE(b.has_value());
    int minx = 32, miny = 32, maxx = -1, maxy = -1;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (blobs.at(x, y)) {
          minx = std::min(minx, x);
          miny = std::min(miny, y);
          maxx = std::max(maxx, x);
          maxy = std::max(maxy, y);
        }
    CHECK(b->x0 == minx);
    CHECK(b->y0 == miny);
    CHECK(b->x1 == maxx);
    CHECK(b->y1 == maxy);
  }
}

TEST_CASE("bbox_iou") {
  const Box a{0, 0, 1, 1};
  CHECK(bbox_iou(a, a) == 1.0);

  const Box disjoint{5, 5, 6, 6};
  CHECK(bbox_iou(a, disjoint) == 0.0);

  // unit squares overlapping half: 0.5 / (1 + 1 - 0.5) = 1/3
  const Box half{0.5, 0, 1.5, 1};
  CHECK(bbox_iou(a, half) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // degenerate zero-area box
  const Box degenerate{2, 2, 2, 2};
  CHECK(bbox_iou(degenerate, degenerate) == 0.0);

  // symmetry
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Box p{rng.uniform(0, 10), rng.uniform(0, 10), 0, 0};
    p.x1 = p.x0 + rng.uniform(0.1, 5);
    p.y1 = p.y0 + rng.uniform(0.1, 5);
    Box q{rng.uniform(0, 10), rng.uniform(0, 10), 0, 0};
    q.x1 = q.x0 + rng.uniform(0.1, 5);
    q.y1 = q.y0 + rng.uniform(0.1, 5);
    CHECK(bbox_iou(p, q) == bbox_iou(q, p));
    const double v = bbox_iou(p, q);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("iou_at counts boxes reaching the threshold") {
  std::vector<BoxRecord> pred = {{"a", {0, 0, 10, 10}}, {"b", {0, 0, 10, 10}}};
  std::vector<BoxRecord> truth = {{"a", {0, 0, 10, 10}}, {"b", {20, 20, 30, 30}}};
  CHECK(iou_at(pred, truth, 0.5) == 0.5);
}

TEST_CASE("manifest split: partition, fraction, determinism") {
  Manifest m;
  for (int w = 0; w < 20; ++w)
    for (int p = 0; p < 3; ++p) {
      PageRecord r;
      r.page_id = "w" + std::to_string(w) + "-p" + std::to_string(p);
      r.writer_id = "w" + std::to_string(w);
      r.path = r.page_id + ".png";
      r.admitted = true;
      m.records.push_back(r);
    }
  assign_splits(m, 0.1, 1234);

  std::set<std::string> train_writers, val_writers;
  for (const auto& r : m.records)
    (r.split == "val" ? val_writers : train_writers).insert(r.writer_id);
  CHECK(val_writers.size() == 2);  // round(0.1 * 20)
  for (const auto& w : val_writers) CHECK(!train_writers.count(w));
  // pages of one writer never straddle the split
  for (const auto& r : m.records) {
    const bool v = val_writers.count(r.writer_id) > 0;
    CHECK(r.split == (v ? "val" : "train"));
  }

  Manifest m2;
  m2.records = m.records;
  assign_splits(m2, 0.1, 1234);
  for (size_t i = 0; i < m.records.size(); ++i) CHECK(m.records[i].split == m2.records[i].split);

  Manifest m3;
  m3.records = m.records;
  assign_splits(m3, 0.1, 99);
  bool any_diff = false;
  for (size_t i = 0; i < m.records.size(); ++i)
    any_diff = any_diff || m.records[i].split != m3.records[i].split;
  CHECK(any_diff);  // different seed moves the split
}

TEST_CASE("manifest file round trip preserves records and header") {
  Manifest m;
  m.config_hash = "deadbeef01020304";
  m.seed = 77;
  PageRecord r;
  r.page_id = "w0-p0";
  r.writer_id = "w0";
  r.path = "/tmp/w0-p0.png";
  r.admitted = false;
  r.kp_count = 12;
  r.split = "train";
  r.error = "unreadable";
  m.records.push_back(r);
  PageRecord r2 = r;
  r2.page_id = "w1-p0";
  r2.writer_id = "w1";
  r2.admitted = true;
  r2.error.clear();
  r2.mask_path = "/tmp/mask.png";
  m.records.push_back(r2);

  const std::string path = "/tmp/saghog_test_manifest.jsonl";
  write_manifest(path, m);
  const auto back = read_manifest(path);
  CHECK(back.config_hash == m.config_hash);
  CHECK(back.seed == 77);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].error == "unreadable");
  CHECK(!back.records[0].admitted);
  CHECK(back.records[1].mask_path.has_value());
  CHECK(*back.records[1].mask_path == "/tmp/mask.png");
}

TEST_CASE("box csv reader") {
  const std::string path = "/tmp/saghog_test_boxes.csv";
  {
    std::ofstream out(path);
    out << "page_id,x0,y0,x1,y1\n";
    out << "a,1,2,3,4\n";
    out << "b,0.5,0,10,20\n";
  }
  const auto recs = read_box_csv(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].page_id == "a");
  CHECK(recs[0].box.x1 == 3);
  CHECK(recs[1].box.x0 == 0.5);
}
