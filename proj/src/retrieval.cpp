#include "saghog/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "saghog/features.hpp"
#include "json.hpp"

namespace saghog {

std::vector<float> aggregate_page(const std::vector<std::vector<float>>& encodings, double alpha) {
  if (encodings.empty()) throw std::invalid_argument("aggregate_page: empty encoding set");
  const size_t dim = encodings[0].size();
  std::vector<double> sum(dim, 0.0);
  for (const auto& e : encodings) {
    if (e.size() != dim) throw std::invalid_argument("aggregate_page: mixed dimensions");
    double norm_sq = 0.0;
    for (float v : e) norm_sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-12) continue;  // zero vectors contribute nothing
    for (size_t i = 0; i < dim; ++i) sum[i] += e[i] / norm;
  }
  double out_norm_sq = 0.0;
  for (auto& v : sum) {
    v = v == 0.0 ? 0.0 : std::copysign(std::pow(std::abs(v), alpha), v);
    out_norm_sq += v * v;
  }
  const double out_norm = std::sqrt(out_norm_sq);
  std::vector<float> out(dim, 0.f);
  if (out_norm >= 1e-12)
    for (size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(sum[i] / out_norm);
  return out;
}

void symmetric_eigen(std::vector<double> a, int n, std::vector<double>& values,
                     std::vector<double>& vectors) {
  vectors.assign(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) vectors[static_cast<size_t>(i) * n + i] = 1.0;

  auto A = [&](int r, int c) -> double& { return a[static_cast<size_t>(r) * n + c]; };
  auto V = [&](int r, int c) -> double& { return vectors[static_cast<size_t>(r) * n + c]; };

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-22) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vpk = V(p, k), vqk = V(q, k);
          V(p, k) = c * vpk - s * vqk;
          V(q, k) = s * vpk + c * vqk;
        }
      }
    }
  }

  values.resize(n);
  for (int i = 0; i < n; ++i) values[i] = A(i, i);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) { return values[x] > values[y]; });
  std::vector<double> sorted_vals(n);
  std::vector<double> sorted_vecs(vectors.size());
  for (int i = 0; i < n; ++i) {
    sorted_vals[i] = values[order[i]];
    for (int k = 0; k < n; ++k) sorted_vecs[static_cast<size_t>(i) * n + k] = V(order[i], k);
  }
  values = std::move(sorted_vals);
  vectors = std::move(sorted_vecs);
}

WhiteningModel fit_whitening(const std::vector<std::vector<float>>& train, int d, double eps) {
  const int n = static_cast<int>(train.size());
  if (n < 2) throw std::invalid_argument("fit_whitening: need at least 2 training descriptors");
  const int src = static_cast<int>(train[0].size());

  WhiteningModel model;
  model.src_dim = src;
  model.eps = eps;
  model.mean.assign(src, 0.0);
  for (const auto& x : train)
    for (int i = 0; i < src; ++i) model.mean[i] += x[i];
  for (auto& v : model.mean) v /= n;

  std::vector<double> centered(static_cast<size_t>(n) * src);
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < src; ++i)
      centered[static_cast<size_t>(r) * src + i] = train[r][i] - model.mean[i];

  std::vector<double> eigvals;
  std::vector<double> axes;  // rows = principal axes in source space
  const double denom = static_cast<double>(n - 1);

  if (n - 1 < src) {
    // Gram-matrix route: eigenvectors of X X^T / (n-1) lift to covariance
    // axes via X^T u / sqrt((n-1) lambda).
    std::vector<double> gram(static_cast<size_t>(n) * n, 0.0);
    for (int r = 0; r < n; ++r)
      for (int c = r; c < n; ++c) {
        double dot = 0.0;
        for (int i = 0; i < src; ++i)
          dot += centered[static_cast<size_t>(r) * src + i] * centered[static_cast<size_t>(c) * src + i];
        gram[static_cast<size_t>(r) * n + c] = gram[static_cast<size_t>(c) * n + r] = dot / denom;
      }
    std::vector<double> gvals, gvecs;
    symmetric_eigen(std::move(gram), n, gvals, gvecs);
    for (int i = 0; i < n; ++i) {
      if (gvals[i] <= eps * 10.0) break;
      std::vector<double> axis(src, 0.0);
      for (int r = 0; r < n; ++r) {
        const double u = gvecs[static_cast<size_t>(i) * n + r];
        for (int c = 0; c < src; ++c) axis[c] += u * centered[static_cast<size_t>(r) * src + c];
      }
      const double scale = 1.0 / std::sqrt(denom * gvals[i]);
      for (auto& v : axis) v *= scale;
      eigvals.push_back(gvals[i]);
      axes.insert(axes.end(), axis.begin(), axis.end());
    }
  } else {
    std::vector<double> cov(static_cast<size_t>(src) * src, 0.0);
    for (int r = 0; r < n; ++r)
      for (int i = 0; i < src; ++i) {
        const double xi = centered[static_cast<size_t>(r) * src + i];
        if (xi == 0.0) continue;
        for (int j = i; j < src; ++j)
          cov[static_cast<size_t>(i) * src + j] += xi * centered[static_cast<size_t>(r) * src + j];
      }
    for (int i = 0; i < src; ++i)
      for (int j = i; j < src; ++j) {
        cov[static_cast<size_t>(i) * src + j] /= denom;
        cov[static_cast<size_t>(j) * src + i] = cov[static_cast<size_t>(i) * src + j];
      }
    std::vector<double> vals, vecs;
    symmetric_eigen(std::move(cov), src, vals, vecs);
    for (int i = 0; i < src; ++i) {
      if (vals[i] <= eps * 10.0) break;
      eigvals.push_back(vals[i]);
      axes.insert(axes.end(), vecs.begin() + static_cast<size_t>(i) * src,
                  vecs.begin() + static_cast<size_t>(i + 1) * src);
    }
  }

  const int rank = static_cast<int>(eigvals.size());
  int out = d;
  if (out > rank) {
    out = rank;
    model.warning = "requested dimension reduced to numerical rank " + std::to_string(rank);
  }
  model.out_dim = out;
  model.projection.resize(static_cast<size_t>(out) * src);
  for (int i = 0; i < out; ++i) {
    const double scale = 1.0 / std::sqrt(eigvals[i] + eps);
    for (int c = 0; c < src; ++c)
      model.projection[static_cast<size_t>(i) * src + c] = axes[static_cast<size_t>(i) * src + c] * scale;
  }
  return model;
}

std::vector<float> whiten(const WhiteningModel& model, const std::vector<float>& x) {
  if (static_cast<int>(x.size()) != model.src_dim)
    throw std::invalid_argument("whiten: dimension mismatch");
  std::vector<float> out(model.out_dim, 0.f);
  for (int i = 0; i < model.out_dim; ++i) {
    double acc = 0.0;
    const double* row = model.projection.data() + static_cast<size_t>(i) * model.src_dim;
    for (int c = 0; c < model.src_dim; ++c) acc += row[c] * (x[c] - model.mean[c]);
    out[i] = static_cast<float>(acc);
  }
  return out;
}

std::vector<float> apply_whitening(const WhiteningModel& model, const std::vector<float>& x) {
  std::vector<float> out = whiten(model, x);
  double norm_sq = 0.0;
  for (float v : out) norm_sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(norm_sq);
  if (norm >= 1e-12)
    for (auto& v : out) v = static_cast<float>(v / norm);
  return out;
}

std::vector<RankedList> rank_all(const std::vector<GlobalDescriptor>& gallery) {
  if (gallery.size() < 2) throw std::invalid_argument("rank_all: need at least 2 descriptors");
  const size_t n = gallery.size();
  std::vector<RankedList> out(n);
  for (size_t q = 0; q < n; ++q) {
    std::vector<std::pair<double, size_t>> scored;
    scored.reserve(n - 1);
    for (size_t j = 0; j < n; ++j) {
      if (j == q) continue;
      double dot = 0.0;
      for (size_t i = 0; i < gallery[q].vec.size(); ++i)
        dot += static_cast<double>(gallery[q].vec[i]) * gallery[j].vec[i];
      scored.emplace_back(dot, j);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return gallery[a.second].page_id < gallery[b.second].page_id;
    });
    out[q].query_id = gallery[q].page_id;
    for (const auto& [score, j] : scored) {
      out[q].gallery_ids.push_back(gallery[j].page_id);
      out[q].scores.push_back(score);
    }
  }
  return out;
}

Metrics evaluate(const std::vector<RankedList>& ranked,
                 const std::map<std::string, ItemLabels>& labels, RetrievalTask task) {
  auto label_of = [&](const std::string& id) -> const std::string& {
    const auto it = labels.find(id);
    if (it == labels.end()) throw std::invalid_argument("evaluate: no label for id " + id);
    return task == RetrievalTask::Writer ? it->second.writer : it->second.page;
  };

  Metrics m;
  double ap_sum = 0.0;
  int top1_hits = 0;
  for (const auto& rl : ranked) {
    const std::string& ql = label_of(rl.query_id);
    int relevant_total = 0;
    for (const auto& gid : rl.gallery_ids)
      if (label_of(gid) == ql) ++relevant_total;
    if (relevant_total == 0) {
      ++m.excluded_queries;
      continue;
    }
    int hits = 0;
    double ap = 0.0;
    for (size_t r = 0; r < rl.gallery_ids.size(); ++r) {
      if (label_of(rl.gallery_ids[r]) == ql) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(r + 1);
      }
    }
    ap /= relevant_total;
    ap_sum += ap;
    if (label_of(rl.gallery_ids[0]) == ql) ++top1_hits;
    ++m.n_queries;
  }
  if (m.n_queries > 0) {
    m.map = ap_sum / m.n_queries;
    m.top1 = static_cast<double>(top1_hits) / m.n_queries;
  }
  return m;
}

void write_descriptors(const std::string& sghd_path, const std::string& index_path,
                       const std::vector<GlobalDescriptor>& descs, const std::string& config_hash) {
  if (descs.empty()) throw std::invalid_argument("write_descriptors: empty set");
  const uint32_t dim = static_cast<uint32_t>(descs[0].vec.size());
  std::vector<float> rows;
  rows.reserve(descs.size() * dim);
  for (const auto& d : descs) {
    if (d.vec.size() != dim) throw std::invalid_argument("write_descriptors: mixed dimensions");
    rows.insert(rows.end(), d.vec.begin(), d.vec.end());
  }
  write_sghd(sghd_path, rows, static_cast<uint32_t>(descs.size()), dim);

  std::ofstream out(index_path);
  if (!out) throw std::runtime_error("write_descriptors: cannot open " + index_path);
  nlohmann::json header;
  header["config_hash"] = config_hash;
  header["count"] = descs.size();
  header["dim"] = dim;
  out << header.dump() << "\n";
  for (const auto& d : descs) {
    nlohmann::json j;
    j["page_id"] = d.page_id;
    out << j.dump() << "\n";
  }
}

std::vector<GlobalDescriptor> read_descriptors(const std::string& sghd_path,
                                               const std::string& index_path,
                                               std::string* config_hash_out) {
  std::vector<float> rows;
  uint32_t count = 0, dim = 0;
  read_sghd(sghd_path, rows, count, dim);

  std::ifstream in(index_path);
  if (!in) throw std::runtime_error("read_descriptors: cannot open " + index_path);
  std::string line;
  std::vector<std::string> ids;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first) {
      first = false;
      if (!j.contains("page_id")) {
        if (config_hash_out) *config_hash_out = j.value("config_hash", "");
        continue;
      }
    }
    ids.push_back(j.at("page_id").get<std::string>());
  }
  if (ids.size() != count)
    throw std::runtime_error("read_descriptors: index/payload count mismatch for " + index_path);

  std::vector<GlobalDescriptor> out(count);
  for (uint32_t i = 0; i < count; ++i) {
    out[i].page_id = ids[i];
    out[i].vec.assign(rows.begin() + static_cast<size_t>(i) * dim,
                      rows.begin() + static_cast<size_t>(i + 1) * dim);
  }
  return out;
}

}  // namespace saghog
