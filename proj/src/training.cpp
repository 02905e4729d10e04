#include "saghog/training.hpp"

#include <algorithm>
#include <deque>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "saghog/image_io.hpp"
#include "json.hpp"

namespace saghog {

namespace {

using ad::Graph;
using ad::MaeB;
using ad::MaeP;
using ad::RvladB;
using ad::RvladP;
using ad::Tensor;
using Id = int32_t;

// Seed stream tags, one per independent random decision.
enum : uint64_t {
  kSeedInit = 0x101,
  kSeedOrder = 0x102,
  kSeedMask = 0x103,
  kSeedAug = 0x104,
  kSeedCrop = 0x105,
  kSeedDropout = 0x106,
  kSeedSampler = 0x107,
  kSeedHead = 0x108,
};

// Bound-id collection mirroring visit_mae / visit_rvlad order.
void collect_linear(const ad::LinearB& b, std::vector<Id>& out) {
  out.push_back(b.w);
  out.push_back(b.b);
}
void collect_norm(const ad::LayerNormB& b, std::vector<Id>& out) {
  out.push_back(b.g);
  out.push_back(b.b);
}
void collect_block(const ad::BlockB& b, std::vector<Id>& out) {
  collect_norm(b.ln1, out);
  collect_linear(b.wq, out);
  collect_linear(b.wk, out);
  collect_linear(b.wv, out);
  collect_linear(b.wo, out);
  collect_norm(b.ln2, out);
  collect_linear(b.fc1, out);
  collect_linear(b.fc2, out);
}
std::vector<Id> collect_encoder_ids(const MaeB& b) {
  std::vector<Id> out;
  collect_linear(b.proj, out);
  out.push_back(b.cls);
  out.push_back(b.pos);
  for (const auto& blk : b.blocks) collect_block(blk, out);
  collect_norm(b.norm, out);
  return out;
}
std::vector<Id> collect_decoder_ids(const MaeB& b) {
  std::vector<Id> out;
  collect_linear(b.dec_embed, out);
  out.push_back(b.mask_token);
  out.push_back(b.dec_pos);
  for (const auto& blk : b.dec_blocks) collect_block(blk, out);
  collect_norm(b.dec_norm, out);
  collect_linear(b.head, out);
  return out;
}

std::vector<Tensor<float>*> encoder_param_ptrs(MaeP<float>& m) {
  std::vector<Tensor<float>*> out;
  auto grab = [&](const std::string&, Tensor<float>& t) { out.push_back(&t); };
  ad::visit_linear(m.proj, "", grab);
  out.push_back(&m.cls);
  out.push_back(&m.pos);
  for (auto& blk : m.blocks) ad::visit_block(blk, "", grab);
  ad::visit_layer_norm(m.norm, "", grab);
  return out;
}
std::vector<Tensor<float>*> decoder_param_ptrs(MaeP<float>& m) {
  std::vector<Tensor<float>*> out;
  auto grab = [&](const std::string&, Tensor<float>& t) { out.push_back(&t); };
  ad::visit_linear(m.dec_embed, "", grab);
  out.push_back(&m.mask_token);
  out.push_back(&m.dec_pos);
  for (auto& blk : m.dec_blocks) ad::visit_block(blk, "", grab);
  ad::visit_layer_norm(m.dec_norm, "", grab);
  ad::visit_linear(m.head, "", grab);
  return out;
}

// Gradients for bound ids; params never touched by the loss keep a null slot.
std::vector<const Tensor<float>*> grads_for(Graph<float>& g, const std::vector<Id>& ids) {
  std::vector<const Tensor<float>*> out;
  out.reserve(ids.size());
  for (Id id : ids) out.push_back(g.grad(id).v.empty() ? nullptr : &g.grad(id));
  return out;
}

std::vector<Tensor<float>*> grads_mutable(Graph<float>& g, const std::vector<Id>& ids) {
  std::vector<Tensor<float>*> out;
  out.reserve(ids.size());
  for (Id id : ids) out.push_back(g.grad(id).v.empty() ? nullptr : &g.ensure_grad(id));
  return out;
}

std::vector<const Tensor<float>*> const_ptrs(const std::vector<Tensor<float>*>& v) {
  return {v.begin(), v.end()};
}

// Renders a binary patch into model input values: ink 0, background 1,
// replicated across channels.
std::vector<float> render_binary_input(const BinaryImage& bin, int channels) {
  std::vector<float> out(static_cast<size_t>(channels) * 32 * 32);
  for (int c = 0; c < channels; ++c)
    for (size_t i = 0; i < bin.data.size(); ++i)
      out[static_cast<size_t>(c) * 1024 + i] = bin.data[i] ? 0.f : 1.f;
  return out;
}

// HOG rows over a float intensity plane (gray or per-channel max for RGB),
// same binning/normalization as the binary-image path.
std::vector<float> hog_rows_from_planes(const std::vector<const float*>& planes) {
  constexpr int kBins = HogGrid::kBins;
  std::vector<float> rows(64 * kBins, 0.f);
  auto at = [&](const float* p, int x, int y) {
    x = std::clamp(x, 0, 31);
    y = std::clamp(y, 0, 31);
    return p[y * 32 + x];
  };
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      float best_mag = 0.f, best_gx = 0.f, best_gy = 0.f;
      for (const float* p : planes) {
        const float gx = at(p, x + 1, y) - at(p, x - 1, y);
        const float gy = at(p, x, y + 1) - at(p, x, y - 1);
        const float mag = std::sqrt(gx * gx + gy * gy);
        if (mag > best_mag) {
          best_mag = mag;
          best_gx = gx;
          best_gy = gy;
        }
      }
      if (best_mag == 0.f) continue;
      double theta = std::atan2(best_gy, best_gx);
      if (theta < 0) theta += M_PI;
      if (theta >= M_PI) theta -= M_PI;
      const int bin = std::min(static_cast<int>(theta / (M_PI / kBins)), kBins - 1);
      rows[static_cast<size_t>((y / 4) * 8 + x / 4) * kBins + bin] += best_mag;
    }
  for (int c = 0; c < 64; ++c) {
    double norm_sq = 0.0;
    for (int b = 0; b < kBins; ++b) {
      const float v = rows[static_cast<size_t>(c) * kBins + b];
      norm_sq += static_cast<double>(v) * v;
    }
    const double norm = std::sqrt(norm_sq);
    for (int b = 0; b < kBins; ++b) {
      auto& v = rows[static_cast<size_t>(c) * kBins + b];
      v = norm < 1e-6 ? 0.f : static_cast<float>(v / norm);
    }
  }
  return rows;
}

std::vector<float> hog_grid_rows(const HogGrid& grid) {
  std::vector<float> rows;
  rows.reserve(64 * HogGrid::kBins);
  for (const auto& cell : grid.cells) rows.insert(rows.end(), cell.begin(), cell.end());
  return rows;
}

}  // namespace

int target_dim_for(const PipelineConfig& cfg) {
  if (cfg.target_feature == "pixel") return cfg.patch_size * cfg.patch_size * cfg.channels;
  if (cfg.target_feature == "hog_rgb" || cfg.target_feature == "hog_gray" ||
      cfg.target_feature == "hog_bin")
    return HogGrid::kBins;
  throw std::invalid_argument("unknown target_feature '" + cfg.target_feature + "'");
}

BinaryImage binarize(const GrayImage& img, const PipelineConfig& cfg) {
  if (cfg.binarization == "otsu") return binarize_otsu(img);
  if (cfg.binarization == "sauvola")
    return binarize_sauvola(img, {cfg.sauvola_window, cfg.sauvola_k, cfg.sauvola_r});
  throw std::invalid_argument("unknown binarization '" + cfg.binarization + "'");
}

TrainPatch make_train_patch(const GrayImage& gray, const RgbImage* rgb, const BinaryImage& bin,
                            const PipelineConfig& cfg, std::string id, int label) {
  if (gray.width != 32 || gray.height != 32) throw std::invalid_argument("make_train_patch: 32x32 only");
  TrainPatch p;
  p.bin = bin;
  p.id = std::move(id);
  p.label = label;

  p.input.resize(static_cast<size_t>(cfg.channels) * 1024);
  if (cfg.channels == 3) {
    for (size_t i = 0; i < 1024; ++i) {
      if (rgb) {
        p.input[i] = rgb->data[3 * i] / 255.f;
        p.input[1024 + i] = rgb->data[3 * i + 1] / 255.f;
        p.input[2048 + i] = rgb->data[3 * i + 2] / 255.f;
      } else {
        const float v = gray.data[i] / 255.f;
        p.input[i] = p.input[1024 + i] = p.input[2048 + i] = v;
      }
    }
  } else {
    for (size_t i = 0; i < 1024; ++i) p.input[i] = gray.data[i] / 255.f;
  }

  if (cfg.target_feature == "hog_bin") {
    HogParams hp;
    hp.soft_binning = cfg.hog_soft_binning;
    p.target = hog_grid_rows(hog_features(bin, hp));
  } else if (cfg.target_feature == "hog_gray") {
    std::vector<float> plane(1024);
    for (size_t i = 0; i < 1024; ++i) plane[i] = gray.data[i] / 255.f;
    p.target = hog_rows_from_planes({plane.data()});
  } else if (cfg.target_feature == "hog_rgb") {
    std::vector<float> r(1024), g2(1024), b2(1024);
    for (size_t i = 0; i < 1024; ++i) {
      if (rgb) {
        r[i] = rgb->data[3 * i] / 255.f;
        g2[i] = rgb->data[3 * i + 1] / 255.f;
        b2[i] = rgb->data[3 * i + 2] / 255.f;
      } else {
        r[i] = g2[i] = b2[i] = gray.data[i] / 255.f;
      }
    }
    p.target = hog_rows_from_planes({r.data(), g2.data(), b2.data()});
  } else if (cfg.target_feature == "pixel") {
    // raw values of each 4x4 block in token order
    const int dim = target_dim_for(cfg);
    p.target.resize(static_cast<size_t>(64) * dim);
    ad::ViTConfig vc = vit_config(cfg);
    ad::patch_to_token_rows(p.input, vc, p.target.data());
  } else {
    throw std::invalid_argument("unknown target_feature '" + cfg.target_feature + "'");
  }
  return p;
}

// ---- k-means ----

KMeansResult kmeans_ratio(const std::vector<float>& points, int n, int dim, int k, uint64_t seed,
                          int max_iters, double tol, double ratio) {
  if (n <= 0 || dim <= 0) throw std::invalid_argument("kmeans_ratio: empty input");
  if (points.size() != static_cast<size_t>(n) * dim)
    throw std::invalid_argument("kmeans_ratio: buffer size mismatch");

  KMeansResult res;
  // Cap k at the number of distinct rows.
  {
    std::set<std::string> distinct;
    for (int i = 0; i < n && static_cast<int>(distinct.size()) < k; ++i)
      distinct.emplace(reinterpret_cast<const char*>(points.data() + static_cast<size_t>(i) * dim),
                       sizeof(float) * dim);
    if (static_cast<int>(distinct.size()) < k) {
      res.warning = "k reduced from " + std::to_string(k) + " to " +
                    std::to_string(distinct.size()) + " (distinct points)";
      k = static_cast<int>(distinct.size());
    }
  }
  res.k = k;

  auto row = [&](int i) { return points.data() + static_cast<size_t>(i) * dim; };
  auto dist_sq = [&](const float* a, const float* b) {
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(a[d]) - b[d];
      acc += diff * diff;
    }
    return acc;
  };

  // k-means++ seeding
  Rng rng(seed);
  std::vector<double> centers(static_cast<size_t>(k) * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  {
    const int first = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(n)));
    for (int d = 0; d < dim; ++d) centers[d] = row(first)[d];
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        double dd = 0.0;
        const float* p = row(i);
        const double* ctr = centers.data() + static_cast<size_t>(c - 1) * dim;
        for (int d = 0; d < dim; ++d) {
          const double diff = p[d] - ctr[d];
          dd += diff * diff;
        }
        d2[i] = std::min(d2[i], dd);
        total += d2[i];
      }
      if (total <= 0.0) {
        res.warning += (res.warning.empty() ? "" : "; ");
        res.warning += "k reduced to " + std::to_string(c) + " during seeding";
        k = c;
        res.k = c;
        centers.resize(static_cast<size_t>(k) * dim);
        break;
      }
      double pick = rng.uniform() * total;
      int chosen = n - 1;
      for (int i = 0; i < n; ++i) {
        pick -= d2[i];
        if (pick <= 0.0) {
          chosen = i;
          break;
        }
      }
      for (int d = 0; d < dim; ++d) centers[static_cast<size_t>(c) * dim + d] = row(chosen)[d];
    }
  }

  res.assignment.assign(n, 0);
  std::vector<int> counts(k, 0);
  std::vector<double> next(static_cast<size_t>(k) * dim, 0.0);
  double prev_inertia = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      const float* p = row(i);
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (int c = 0; c < k; ++c) {
        double dd = 0.0;
        const double* ctr = centers.data() + static_cast<size_t>(c) * dim;
        for (int d = 0; d < dim; ++d) {
          const double diff = p[d] - ctr[d];
          dd += diff * diff;
        }
        if (dd < best) {
          best = dd;
          best_c = c;
        }
      }
      res.assignment[i] = best_c;
      inertia += best;
    }
    res.inertia_curve.push_back(inertia);

    std::fill(counts.begin(), counts.end(), 0);
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const int c = res.assignment[i];
      ++counts[c];
      const float* p = row(i);
      double* acc = next.data() + static_cast<size_t>(c) * dim;
      for (int d = 0; d < dim; ++d) acc[d] += p[d];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its center
      for (int d = 0; d < dim; ++d)
        centers[static_cast<size_t>(c) * dim + d] = next[static_cast<size_t>(c) * dim + d] / counts[c];
    }

    if (prev_inertia < std::numeric_limits<double>::infinity()) {
      const double rel = (prev_inertia - inertia) / std::max(prev_inertia, 1e-12);
      if (rel < tol) break;
    }
    prev_inertia = inertia;
  }

  res.centers.resize(centers.size());
  for (size_t i = 0; i < centers.size(); ++i) res.centers[i] = static_cast<float>(centers[i]);

  // Ratio test on Euclidean distances to the final centers.
  res.kept.assign(n, 0);
  if (k < 2) {
    std::fill(res.kept.begin(), res.kept.end(), 1);
  } else {
    for (int i = 0; i < n; ++i) {
      double d1 = std::numeric_limits<double>::infinity(), dsec = d1;
      const float* p = row(i);
      for (int c = 0; c < k; ++c) {
        double dd = 0.0;
        const double* ctr = centers.data() + static_cast<size_t>(c) * dim;
        for (int d = 0; d < dim; ++d) {
          const double diff = p[d] - ctr[d];
          dd += diff * diff;
        }
        if (dd < d1) {
          dsec = d1;
          d1 = dd;
        } else if (dd < dsec) {
          dsec = dd;
        }
      }
      const double r1 = std::sqrt(d1), r2 = std::sqrt(dsec);
      res.kept[i] = (r2 > 0.0 && r1 / r2 < ratio) ? 1 : 0;
    }
  }
  (void)dist_sq;
  return res;
}

void write_pseudo_labels(const std::string& path, const std::vector<std::string>& ids,
                         const KMeansResult& result, const std::string& config_hash) {
  if (ids.size() != result.assignment.size())
    throw std::invalid_argument("write_pseudo_labels: id/assignment mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pseudo_labels: cannot open " + path);
  nlohmann::json header;
  header["config_hash"] = config_hash;
  header["k"] = result.k;
  if (!result.warning.empty()) header["warning"] = result.warning;
  out << header.dump() << "\n";
  for (size_t i = 0; i < ids.size(); ++i) {
    nlohmann::json j;
    j["patch_id"] = ids[i];
    j["cluster"] = result.assignment[i];
    j["kept"] = result.kept[i] != 0;
    out << j.dump() << "\n";
  }
}

std::map<std::string, PseudoLabelEntry> read_pseudo_labels(const std::string& path,
                                                           std::string* config_hash_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_pseudo_labels: cannot open " + path);
  std::map<std::string, PseudoLabelEntry> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first) {
      first = false;
      if (!j.contains("patch_id")) {
        if (config_hash_out) *config_hash_out = j.value("config_hash", "");
        continue;
      }
    }
    PseudoLabelEntry e;
    e.cluster = j.at("cluster").get<int>();
    e.kept = j.at("kept").get<bool>();
    out[j.at("patch_id").get<std::string>()] = e;
  }
  return out;
}

// ---- P x K sampler ----

std::vector<std::vector<int>> pk_epoch_batches(const std::vector<int>& labels, int p, int k,
                                               Rng& rng, std::string* warning) {
  std::map<int, std::vector<int>> by_class;
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<int>(i));
  std::vector<int> classes;
  for (const auto& [cls, _] : by_class) classes.push_back(cls);
  if (static_cast<int>(classes.size()) < 2)
    throw std::invalid_argument("pk_epoch_batches: need at least 2 classes");
  if (static_cast<int>(classes.size()) < p) {
    if (warning)
      *warning = "classes_per_batch reduced from " + std::to_string(p) + " to " +
                 std::to_string(classes.size());
    p = static_cast<int>(classes.size());
  }

  rng.shuffle(classes);
  std::vector<std::vector<int>> batches;
  for (size_t start = 0; start < classes.size(); start += p) {
    std::vector<int> group(classes.begin() + start,
                           classes.begin() + std::min(classes.size(), start + p));
    if (group.size() < static_cast<size_t>(p)) {
      // top up the final group with distinct classes from the rest
      std::vector<int> pool(classes.begin(), classes.begin() + start);
      rng.shuffle(pool);
      for (int c : pool) {
        if (group.size() == static_cast<size_t>(p)) break;
        group.push_back(c);
      }
    }
    std::vector<int> batch;
    batch.reserve(static_cast<size_t>(p) * k);
    for (int cls : group) {
      auto pool = by_class[cls];
      rng.shuffle(pool);
      for (int i = 0; i < k; ++i) {
        if (i < static_cast<int>(pool.size()))
          batch.push_back(pool[i]);
        else
          batch.push_back(pool[rng.uniform_below(pool.size())]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---- checkpoint helpers ----

ad::Checkpoint make_model_checkpoint(MaeP<float>& model, RvladP<float>* head,
                                     const PipelineConfig& cfg, const std::string& stage) {
  ad::Checkpoint ckpt;
  nlohmann::json meta;
  meta["stage"] = stage;
  meta["config_hash"] = config_hash(cfg);
  meta["vit"] = {{"patch", model.cfg.patch},         {"dim", model.cfg.dim},
                 {"depth", model.cfg.depth},         {"decoder_dim", model.cfg.decoder_dim},
                 {"decoder_depth", model.cfg.decoder_depth}, {"mlp_ratio", model.cfg.mlp_ratio},
                 {"channels", model.cfg.channels},   {"mask_ratio", model.cfg.mask_ratio},
                 {"target_dim", model.cfg.target_dim}};
  if (head)
    meta["rvlad"] = {{"clusters", head->clusters},
                     {"mode", head->mode == ad::RvladMode::Tokens ? "tokens" : "class_token"}};
  ckpt.meta_json = meta.dump();
  ad::visit_mae(model, [&](const std::string& name, Tensor<float>& t) {
    ckpt.params.push_back({name, t, {}, {}});
  });
  if (head)
    ad::visit_rvlad(*head, [&](const std::string& name, Tensor<float>& t) {
      ckpt.params.push_back({name, t, {}, {}});
    });
  return ckpt;
}

void load_model_checkpoint(const ad::Checkpoint& ckpt, MaeP<float>& model, RvladP<float>* head) {
  std::map<std::string, const ad::Param*> by_name;
  for (const auto& p : ckpt.params) by_name[p.name] = &p;
  auto load_into = [&](const std::string& name, Tensor<float>& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    if (it->second->value.shape != t.shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "' (" +
                               it->second->value.shape_str() + " vs " + t.shape_str() + ")");
    t = it->second->value;
  };
  ad::visit_mae(model, load_into);
  if (head) ad::visit_rvlad(*head, load_into);
}

// ---- pretraining ----

namespace {

struct StepBatch {
  std::vector<const std::vector<float>*> inputs;  // possibly augmented
  std::deque<std::vector<float>> aug_storage;     // owns augmented copies; stable addresses
  std::vector<const std::vector<float>*> targets;
  std::vector<ad::MaskPlan> plans;
};

double pretrain_step(MaeP<float>& model, ad::AdamW& opt, const StepBatch& batch,
                     const PipelineConfig& cfg, double lr, bool* applied) {
  const ad::ViTConfig& vc = model.cfg;
  const int b = static_cast<int>(batch.inputs.size());
  const int nt = vc.num_tokens();
  const int tin = vc.token_input_dim();

  Graph<float> g;
  MaeB mb = ad::bind_mae(g, model, true, true);

  Tensor<float> token_rows({b * nt, tin});
  for (int i = 0; i < b; ++i)
    ad::patch_to_token_rows(*batch.inputs[i], vc,
                            token_rows.v.data() + static_cast<size_t>(i) * nt * tin);
  const Id tokens = g.input(std::move(token_rows), false);

  auto pred = ad::mae_forward(g, mb, vc, tokens, batch.plans);

  const int td = vc.target_dim;
  Tensor<float> target_rows({static_cast<int>(pred.masked_rows.size()), td});
  {
    size_t r = 0;
    for (int i = 0; i < b; ++i)
      for (int t : batch.plans[i].masked) {
        const float* src = batch.targets[i]->data() + static_cast<size_t>(t) * td;
        std::copy_n(src, td, target_rows.v.data() + r * td);
        ++r;
      }
  }
  const Id targets = g.input(std::move(target_rows), false);
  const Id loss = mae_loss(g, pred.predictions, targets);
  const double loss_value = g.value(loss).v[0];
  if (!std::isfinite(loss_value)) {
    *applied = false;
    throw std::runtime_error("pretrain: non-finite loss");
  }
  g.backward(loss);

  std::vector<Id> ids = collect_encoder_ids(mb);
  const auto dec_ids = collect_decoder_ids(mb);
  ids.insert(ids.end(), dec_ids.begin(), dec_ids.end());
  auto gm = grads_mutable(g, ids);
  clip_gradients(gm, cfg.pre_clip);

  std::vector<Tensor<float>*> params = encoder_param_ptrs(model);
  const auto dec_params = decoder_param_ptrs(model);
  params.insert(params.end(), dec_params.begin(), dec_params.end());
  *applied = opt.step(params, const_ptrs(gm), lr);
  return loss_value;
}

void apply_input_augmentation(StepBatch& batch, const TrainPatch& patch,
                              const PipelineConfig& cfg, Rng& rng) {
  const bool to_gray_aug = cfg.channels == 3 && rng.bernoulli(cfg.aug_gray_p);
  const bool to_bin_aug = rng.bernoulli(cfg.aug_bin_p);
  if (!to_gray_aug && !to_bin_aug) {
    batch.inputs.push_back(&patch.input);
    return;
  }
  std::vector<float> v;
  if (to_bin_aug) {
    v = render_binary_input(patch.bin, cfg.channels);
  } else {
    v = patch.input;
    for (size_t i = 0; i < 1024; ++i) {
      const float y = 0.299f * v[i] + 0.587f * v[1024 + i] + 0.114f * v[2048 + i];
      v[i] = v[1024 + i] = v[2048 + i] = y;
    }
  }
  batch.aug_storage.push_back(std::move(v));
  batch.inputs.push_back(&batch.aug_storage.back());
}

void maybe_save_checkpoint(MaeP<float>& model, const PipelineConfig& cfg,
                           const std::string& checkpoint_dir, const std::string& name) {
  if (checkpoint_dir.empty()) return;
  std::filesystem::create_directories(checkpoint_dir);
  auto ckpt = make_model_checkpoint(model, nullptr, cfg, "pretrain");
  ad::save_checkpoint(checkpoint_dir + "/" + name, ckpt);
}

}  // namespace

PretrainResult pretrain_patches(const PatchStore& store, const PipelineConfig& cfg, uint64_t seed,
                                std::ostream* log_csv, const std::string& checkpoint_dir) {
  if (store.patches.empty()) throw std::invalid_argument("pretrain_patches: empty patch store");
  ad::ViTConfig vc = vit_config(cfg);
  vc.target_dim = store.target_dim;

  Rng init_rng(derive_seed(seed, kSeedInit));
  PretrainResult res;
  res.model = ad::init_mae<float>(vc, init_rng);

  ad::AdamW opt({cfg.pre_lr, 0.9, 0.95, 1e-8, cfg.pre_weight_decay});
  const int n = static_cast<int>(store.patches.size());
  const int batch_size = std::max(1, cfg.pre_batch_pages * cfg.pre_patches_per_page);
  const int steps_per_epoch = (n + batch_size - 1) / batch_size;

  for (int epoch = 0; epoch < cfg.pre_epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(seed, kSeedOrder, epoch));
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int steps = 0;
    double lr = 0.0;
    for (int start = 0; start < n; start += batch_size) {
      StepBatch batch;
      const int end = std::min(n, start + batch_size);
      for (int i = start; i < end; ++i) {
        const TrainPatch& p = store.patches[order[i]];
        Rng aug_rng(derive_seed(seed, kSeedAug, epoch, order[i]));
        apply_input_augmentation(batch, p, cfg, aug_rng);
        batch.targets.push_back(&p.target);
        Rng mask_rng(derive_seed(seed, kSeedMask, epoch, order[i]));
        batch.plans.push_back(ad::plan_mask(mask_rng, cfg.mask_ratio, vc.num_tokens()));
      }
      const double epoch_pos = epoch + static_cast<double>(steps) / steps_per_epoch;
      lr = ad::cosine_warmup_lr(epoch_pos, cfg.pre_warmup_epochs, cfg.pre_epochs, cfg.pre_lr);
      bool applied = true;
      double loss = 0.0;
      try {
        loss = pretrain_step(res.model, opt, batch, cfg, lr, &applied);
      } catch (const std::runtime_error&) {
        maybe_save_checkpoint(res.model, cfg, checkpoint_dir, "pretrain_abort.sgck");
        throw;
      }
      if (!applied) ++res.skipped_steps;
      epoch_loss += loss;
      ++steps;
    }
    epoch_loss /= std::max(1, steps);
    res.epoch_loss.push_back(epoch_loss);
    if (log_csv) (*log_csv) << epoch + 1 << ",train," << epoch_loss << ",," << lr << "\n";
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      maybe_save_checkpoint(res.model, cfg, checkpoint_dir,
                            "pretrain_epoch" + std::to_string(epoch + 1) + ".sgck");
  }
  return res;
}

PretrainResult pretrain_manifest(const Manifest& manifest, const std::string& manifest_dir,
                                 const PipelineConfig& cfg, uint64_t seed, std::ostream* log_csv,
                                 const std::string& checkpoint_dir) {
  std::vector<const PageRecord*> pages;
  for (const auto& r : manifest.records)
    if (r.admitted && r.split == "train") pages.push_back(&r);
  if (pages.empty()) throw std::runtime_error("pretrain: no admitted training pages in manifest");

  // Decode once; pages are revisited every epoch.
  std::vector<LoadedImage> cache(pages.size());
  for (size_t i = 0; i < pages.size(); ++i) {
    std::string path = pages[i]->path;
    if (!path.empty() && path[0] != '/' && !manifest_dir.empty()) path = manifest_dir + "/" + path;
    cache[i] = load_image(path);
  }

  ad::ViTConfig vc = vit_config(cfg);
  Rng init_rng(derive_seed(seed, kSeedInit));
  PretrainResult res;
  res.model = ad::init_mae<float>(vc, init_rng);
  ad::AdamW opt({cfg.pre_lr, 0.9, 0.95, 1e-8, cfg.pre_weight_decay});

  DetectorParams det;
  det.octaves = cfg.sift_octaves;
  det.scales_per_octave = cfg.sift_scales;
  det.contrast_threshold = cfg.sift_contrast;
  det.edge_ratio = cfg.sift_edge_ratio;

  const int n_pages = static_cast<int>(pages.size());
  const int steps_per_epoch =
      (n_pages + cfg.pre_batch_pages - 1) / std::max(1, cfg.pre_batch_pages);

  for (int epoch = 0; epoch < cfg.pre_epochs; ++epoch) {
    std::vector<int> order(n_pages);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(seed, kSeedOrder, epoch));
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int steps = 0;
    double lr = 0.0;
    for (int start = 0; start < n_pages; start += cfg.pre_batch_pages) {
      const int end = std::min(n_pages, start + cfg.pre_batch_pages);
      std::vector<TrainPatch> patches;
      for (int pi = start; pi < end; ++pi) {
        const int page = order[pi];
        const LoadedImage& img = cache[page];
        Rng crop_rng(derive_seed(seed, kSeedCrop, epoch, page));
        const int size = cfg.crop_size;

        // One offset drives both the gray and, when present, the color crop.
        GrayImage gray_crop = random_crop(img.gray, size, crop_rng);
        RgbImage rgb_crop;
        if (cfg.channels == 3 && img.has_color) {
          Rng crop_rng2(derive_seed(seed, kSeedCrop, epoch, page));
          rgb_crop = random_crop(img.rgb, size, crop_rng2);
        }

        const BinaryImage bin = binarize(gray_crop, cfg);
        auto kps = detect_keypoints(bin, det);
        auto sampled = sample_patches(bin, kps, cfg.min_ink, cfg.pre_patches_per_page,
                                      pages[page]->page_id);
        for (size_t s = 0; s < sampled.size(); ++s) {
          const auto [x0, y0] = sampled.origins[s];
          GrayImage gp = crop(gray_crop, x0, y0, 32, 32);
          RgbImage rp;
          const RgbImage* rpp = nullptr;
          if (cfg.channels == 3 && img.has_color) {
            rp = crop(rgb_crop, x0, y0, 32, 32);
            rpp = &rp;
          }
          patches.push_back(make_train_patch(gp, rpp, sampled.patches[s], cfg,
                                             sampled.prov[s].page_id + "#" +
                                                 std::to_string(sampled.prov[s].keypoint_index)));
        }
      }
      if (patches.empty()) continue;

      StepBatch batch;
      for (size_t i = 0; i < patches.size(); ++i) {
        Rng aug_rng(derive_seed(seed, kSeedAug, epoch, start * 64 + i));
        apply_input_augmentation(batch, patches[i], cfg, aug_rng);
        batch.targets.push_back(&patches[i].target);
        Rng mask_rng(derive_seed(seed, kSeedMask, epoch, start * 64 + i));
        batch.plans.push_back(ad::plan_mask(mask_rng, cfg.mask_ratio, vc.num_tokens()));
      }
      const double epoch_pos = epoch + static_cast<double>(steps) / steps_per_epoch;
      lr = ad::cosine_warmup_lr(epoch_pos, cfg.pre_warmup_epochs, cfg.pre_epochs, cfg.pre_lr);
      bool applied = true;
      double loss = 0.0;
      try {
        loss = pretrain_step(res.model, opt, batch, cfg, lr, &applied);
      } catch (const std::runtime_error&) {
        maybe_save_checkpoint(res.model, cfg, checkpoint_dir, "pretrain_abort.sgck");
        throw;
      }
      if (!applied) ++res.skipped_steps;
      epoch_loss += loss;
      ++steps;
    }
    if (steps == 0) throw std::runtime_error("pretrain: no patches sampled in epoch");
    epoch_loss /= steps;
    res.epoch_loss.push_back(epoch_loss);
    if (log_csv) (*log_csv) << epoch + 1 << ",train," << epoch_loss << ",," << lr << "\n";
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      maybe_save_checkpoint(res.model, cfg, checkpoint_dir,
                            "pretrain_epoch" + std::to_string(epoch + 1) + ".sgck");
  }
  return res;
}

// ---- encoding ----

namespace {

// Encoder + NetRVLAD on a rectangular group of patches that keep the same
// token set sizes; used for both inference (all tokens) and dropout buckets.
Id encode_group(Graph<float>& g, const MaeB& mb, const RvladB& rb, const ad::ViTConfig& vc,
                ad::RvladMode mode, int clusters,
                const std::vector<const std::vector<float>*>& inputs,
                const std::vector<std::vector<int>>& kept) {
  const int b = static_cast<int>(inputs.size());
  const int nt = vc.num_tokens();
  const int tin = vc.token_input_dim();
  Tensor<float> token_rows({b * nt, tin});
  for (int i = 0; i < b; ++i)
    ad::patch_to_token_rows(*inputs[i], vc, token_rows.v.data() + static_cast<size_t>(i) * nt * tin);
  const Id tokens = g.input(std::move(token_rows), false);
  auto seq = ad::embed_and_select(g, mb, vc, tokens, kept);
  auto enc = ad::encoder_forward(g, mb.blocks, mb.norm, seq, vc.dim, vc.heads());
  auto sel = ad::select_rvlad_input(g, enc, mode);
  return ad::netrvlad_forward(g, rb, sel, clusters);
}

}  // namespace

std::vector<std::vector<float>> encode_patches(const MaeP<float>& model, const RvladP<float>& head,
                                               const std::vector<std::vector<float>>& patch_inputs,
                                               const PipelineConfig& cfg) {
  (void)cfg;
  std::vector<std::vector<float>> out;
  const ad::ViTConfig& vc = model.cfg;
  const int nt = vc.num_tokens();
  constexpr size_t kChunk = 128;
  std::vector<int> all(nt);
  std::iota(all.begin(), all.end(), 0);
  for (size_t start = 0; start < patch_inputs.size(); start += kChunk) {
    const size_t end = std::min(patch_inputs.size(), start + kChunk);
    Graph<float> g;
    MaeB mb = ad::bind_mae(g, model, false, false);
    RvladB rb = ad::bind_rvlad(g, head, false);
    std::vector<const std::vector<float>*> inputs;
    std::vector<std::vector<int>> kept;
    for (size_t i = start; i < end; ++i) {
      inputs.push_back(&patch_inputs[i]);
      kept.push_back(all);
    }
    const Id emb = encode_group(g, mb, rb, vc, head.mode, head.clusters, inputs, kept);
    const auto& v = g.value(emb);
    const int dim = v.shape[1];
    for (int i = 0; i < v.shape[0]; ++i)
      out.emplace_back(v.v.begin() + static_cast<size_t>(i) * dim,
                       v.v.begin() + static_cast<size_t>(i + 1) * dim);
  }
  return out;
}

std::vector<float> encode_page(const MaeP<float>& model, const RvladP<float>& head,
                               const std::vector<std::vector<float>>& patch_inputs,
                               const PipelineConfig& cfg) {
  return aggregate_page(encode_patches(model, head, patch_inputs, cfg), cfg.power_alpha);
}

double pages_map(const MaeP<float>& model, const RvladP<float>& head,
                 const std::vector<ValidationPage>& pages, const PipelineConfig& cfg) {
  std::vector<GlobalDescriptor> gallery;
  std::map<std::string, ItemLabels> labels;
  for (const auto& p : pages) {
    if (p.patch_inputs.empty()) continue;
    GlobalDescriptor d;
    d.page_id = p.page_id;
    d.vec = encode_page(model, head, p.patch_inputs, cfg);
    gallery.push_back(std::move(d));
    labels[p.page_id] = {p.writer_id, p.page_id};
  }
  if (gallery.size() < 2) return 0.0;
  const auto ranked = rank_all(gallery);
  return evaluate(ranked, labels, RetrievalTask::Writer).map;
}

// ---- finetuning ----

FinetuneResult finetune(const MaeP<float>& init, const PipelineConfig& cfg,
                        const PatchStore& train, const std::vector<ValidationPage>& val_pages,
                        uint64_t seed, std::ostream* log_csv) {
  if (train.patches.empty()) throw std::invalid_argument("finetune: empty training store");
  for (const auto& p : train.patches)
    if (p.label < 0) throw std::invalid_argument("finetune: unlabeled patch " + p.id);

  FinetuneResult res;
  res.model = init;

  Rng head_rng(derive_seed(seed, kSeedHead));
  const ad::RvladMode mode =
      cfg.rvlad_mode == "tokens" ? ad::RvladMode::Tokens : ad::RvladMode::ClassToken;
  res.head = ad::init_rvlad<float>(init.cfg.dim, cfg.rvlad_clusters, mode, head_rng);

  ad::AdamW opt({cfg.ft_lr, 0.9, 0.95, 1e-8, cfg.ft_weight_decay});
  MsLossParams ms{cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda, cfg.ms_epsilon};

  std::vector<int> labels;
  for (const auto& p : train.patches) labels.push_back(p.label);

  EarlyStopper stopper;
  stopper.patience = cfg.ft_patience;
  MaeP<float> best_model = res.model;
  RvladP<float> best_head = res.head;

  const ad::ViTConfig& vc = res.model.cfg;
  const int nt = vc.num_tokens();

  int global_step = 0;
  for (int epoch = 0; epoch < cfg.ft_epochs; ++epoch) {
    Rng sampler_rng(derive_seed(seed, kSeedSampler, epoch));
    std::string warn;
    const auto batches =
        pk_epoch_batches(labels, cfg.ft_classes_per_batch, cfg.ft_samples_per_class, sampler_rng, &warn);
    const int steps_per_epoch = static_cast<int>(batches.size());

    double epoch_loss = 0.0;
    double lr = 0.0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch_idx = batches[bi];
      const int b = static_cast<int>(batch_idx.size());

      // Per-patch augmentation: random-kernel erosion/dilation on the binary
      // patch, then token dropout. Bucket by kept-token count so every group
      // stays rectangular.
      std::vector<std::vector<float>> aug_inputs(b);
      std::vector<std::vector<int>> kept_lists(b);
      std::map<size_t, std::vector<int>> buckets;  // kept count -> positions in batch
      for (int i = 0; i < b; ++i) {
        const TrainPatch& p = train.patches[batch_idx[i]];
        Rng aug_rng(derive_seed(seed, kSeedAug, epoch * 100003ull + bi, i));
        BinaryImage bin = p.bin;
        auto random_kernel = [&]() {
          Kernel3 kern{};
          bool any = false;
          for (auto& c : kern) {
            c = aug_rng.bernoulli(0.5);
            any = any || c;
          }
          if (!any) kern[4] = true;
          return kern;
        };
        if (aug_rng.bernoulli(cfg.aug_morph_p)) bin = morph(bin, random_kernel(), MorphMode::Erode);
        if (aug_rng.bernoulli(cfg.aug_morph_p)) bin = morph(bin, random_kernel(), MorphMode::Dilate);
        aug_inputs[i] = render_binary_input(bin, vc.channels);

        Rng drop_rng(derive_seed(seed, kSeedDropout, epoch * 100003ull + bi, i));
        kept_lists[i] = cfg.token_dropout_p > 0.0 ? ad::token_dropout(nt, cfg.token_dropout_p, drop_rng)
                                                  : std::vector<int>();
        if (kept_lists[i].empty()) {
          kept_lists[i].resize(nt);
          std::iota(kept_lists[i].begin(), kept_lists[i].end(), 0);
        }
        buckets[kept_lists[i].size()].push_back(i);
      }

      Graph<float> g;
      MaeB mb = ad::bind_mae(g, res.model, !cfg.freeze_backbone, false);
      RvladB rb = ad::bind_rvlad(g, res.head, true);

      std::vector<Id> bucket_embs;
      std::vector<int> emb_order;  // original batch position per embedding row
      for (const auto& [count, members] : buckets) {
        std::vector<const std::vector<float>*> inputs;
        std::vector<std::vector<int>> kept;
        for (int i : members) {
          inputs.push_back(&aug_inputs[i]);
          kept.push_back(kept_lists[i]);
          emb_order.push_back(i);
        }
        bucket_embs.push_back(encode_group(g, mb, rb, vc, mode, cfg.rvlad_clusters, inputs, kept));
      }
      Id embeddings = bucket_embs.size() == 1
                          ? bucket_embs[0]
                          : g.concat_rows(std::span<const Id>(bucket_embs));
      // restore original batch order
      std::vector<int> restore(b);
      for (int r = 0; r < b; ++r) restore[emb_order[r]] = r;
      embeddings = g.gather_rows(embeddings, restore);

      std::vector<int> batch_labels;
      for (int idx : batch_idx) batch_labels.push_back(train.patches[idx].label);
      const Id loss = ms_loss(g, embeddings, batch_labels, ms);
      const double loss_value = g.value(loss).v[0];
      if (!std::isfinite(loss_value)) throw std::runtime_error("finetune: non-finite loss");
      g.backward(loss);

      std::vector<Id> ids;
      if (!cfg.freeze_backbone) ids = collect_encoder_ids(mb);
      ids.push_back(rb.w);
      ids.push_back(rb.b);
      auto gm = grads_mutable(g, ids);
      clip_gradients(gm, cfg.ft_clip);

      std::vector<Tensor<float>*> params;
      if (!cfg.freeze_backbone) params = encoder_param_ptrs(res.model);
      params.push_back(&res.head.w);
      params.push_back(&res.head.b);

      const double epoch_pos = epoch + static_cast<double>(bi) / std::max(1, steps_per_epoch);
      lr = ad::cosine_warmup_lr(epoch_pos, cfg.ft_warmup_epochs, cfg.ft_epochs, cfg.ft_lr);
      if (!opt.step(params, const_ptrs(gm), lr)) ++res.skipped_steps;
      epoch_loss += loss_value;
      ++global_step;
    }
    epoch_loss /= std::max<size_t>(1, batches.size());

    const double val_map = pages_map(res.model, res.head, val_pages, cfg);
    res.val_map.push_back(val_map);
    if (log_csv) {
      (*log_csv) << epoch + 1 << ",train," << epoch_loss << ",," << lr << "\n";
      (*log_csv) << epoch + 1 << ",val,," << val_map << "," << lr << "\n";
    }
    if (stopper.update(val_map, epoch)) {
      best_model = res.model;
      best_head = res.head;
    }
    if (stopper.should_stop()) break;
  }

  res.best_epoch = stopper.best_epoch;
  res.best_map = stopper.best;
  if (!val_pages.empty() && stopper.best_epoch >= 0) {
    res.model = std::move(best_model);
    res.head = std::move(best_head);
  }
  return res;
}

}  // namespace saghog
