#pragma once

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "saghog/checkpoint.hpp"
#include "saghog/config.hpp"
#include "saghog/curation.hpp"
#include "saghog/features.hpp"
#include "saghog/model.hpp"
#include "saghog/retrieval.hpp"

namespace saghog {

// ---- multi-similarity loss ----

struct MsLossParams {
  double alpha = 2.0;    // positive-pair scale
  double beta = 50.0;    // negative-pair scale
  double lambda = 0.5;   // similarity threshold
  double epsilon = 0.1;  // mining margin
};

// Graph-built Multi-Similarity loss over unit-norm embeddings [B, D] with
// cosine similarity. Pair mining keeps negatives with s > min_pos - eps and
// positives with s < max_neg + eps; anchors whose kept sets are empty are
// skipped and the sum is divided by the batch size. Mining is done on the
// forward values and treated as constant for the backward pass.
template <class T>
int32_t ms_loss(ad::Graph<T>& g, int32_t embeddings, const std::vector<int>& labels,
                const MsLossParams& p = {}, int* active_anchors = nullptr) {
  const auto& eshape = g.value(embeddings).shape;
  SAGHOG_CHECK_SHAPES(eshape.size() == 2, "ms_loss", g.value(embeddings).shape_str(), "[B,D]");
  const int b = eshape[0];
  SAGHOG_CHECK_SHAPES(static_cast<size_t>(b) == labels.size(), "ms_loss", "labels", "[B]");

  const auto sim = g.matmul(embeddings, g.transpose_last(embeddings));  // [B, B]
  const auto sim_rows = g.reshape(sim, {b * b, 1});
  // Copy: node storage reallocates as the per-anchor terms are built.
  const ad::Tensor<T> s = g.value(sim);

  std::vector<int32_t> terms;
  int active = 0;
  for (int i = 0; i < b; ++i) {
    std::vector<int> pos, neg;
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    double min_pos = std::numeric_limits<double>::infinity();
    double max_neg = -std::numeric_limits<double>::infinity();
    for (int j : pos) min_pos = std::min(min_pos, static_cast<double>(s.v[static_cast<size_t>(i) * b + j]));
    for (int j : neg) max_neg = std::max(max_neg, static_cast<double>(s.v[static_cast<size_t>(i) * b + j]));

    std::vector<int> kept_pos, kept_neg;
    for (int j : pos)
      if (s.v[static_cast<size_t>(i) * b + j] < max_neg + p.epsilon) kept_pos.push_back(i * b + j);
    for (int j : neg)
      if (s.v[static_cast<size_t>(i) * b + j] > min_pos - p.epsilon) kept_neg.push_back(i * b + j);
    if (kept_pos.empty() || kept_neg.empty()) continue;
    ++active;

    const auto sp = g.gather_rows(sim_rows, std::move(kept_pos));
    const auto pos_exp = g.exp_(g.scale(g.add_const(sp, T(-p.lambda)), T(-p.alpha)));
    const auto pos_term = g.scale(g.log_(g.add_const(g.sum_all(pos_exp), T(1))), T(1.0 / p.alpha));

    const auto sn = g.gather_rows(sim_rows, std::move(kept_neg));
    const auto neg_exp = g.exp_(g.scale(g.add_const(sn, T(-p.lambda)), T(p.beta)));
    const auto neg_term = g.scale(g.log_(g.add_const(g.sum_all(neg_exp), T(1))), T(1.0 / p.beta));

    terms.push_back(g.add(pos_term, neg_term));
  }
  if (active_anchors) *active_anchors = active;
  if (terms.empty()) return g.input(ad::Tensor<T>::scalar(T(0)));
  return g.scale(g.sum_all(g.concat_rows(std::span<const int32_t>(terms))), T(1.0 / b));
}

// Masked-position MSE; predictions and targets are [n, target_dim] rows
// gathered in the same plan order.
template <class T>
int32_t mae_loss(ad::Graph<T>& g, int32_t predictions, int32_t targets) {
  return ad::mse_loss(g, predictions, targets);
}

// ---- pseudo-labels (Cl-S) ----

struct KMeansResult {
  int k = 0;
  std::vector<float> centers;  // k x dim
  std::vector<int> assignment;
  std::vector<uint8_t> kept;   // nearest/second-nearest ratio < threshold
  std::vector<double> inertia_curve;
  std::string warning;
};

// k-means++ seeding, Lloyd iterations until max_iters or the relative
// inertia change drops below tol, then the ratio test. Fewer distinct points
// than k reduces k with a warning.
KMeansResult kmeans_ratio(const std::vector<float>& points, int n, int dim, int k, uint64_t seed,
                          int max_iters = 100, double tol = 1e-4, double ratio = 0.9);

struct PseudoLabelEntry {
  int cluster = -1;
  bool kept = false;
};

void write_pseudo_labels(const std::string& path, const std::vector<std::string>& ids,
                         const KMeansResult& result, const std::string& config_hash);
std::map<std::string, PseudoLabelEntry> read_pseudo_labels(const std::string& path,
                                                           std::string* config_hash_out = nullptr);

// ---- P x K batch sampling ----

// Each epoch covers every class at least once; classes with fewer than K
// samples are resampled with replacement. P shrinks (with a warning) when
// fewer classes exist.
std::vector<std::vector<int>> pk_epoch_batches(const std::vector<int>& labels, int p, int k,
                                               Rng& rng, std::string* warning = nullptr);

// ---- early stopping on validation mAP ----

struct EarlyStopper {
  int patience = 5;
  double best = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int since_improve = 0;

  // Returns true when the new value strictly improves on the best.
  bool update(double value, int epoch) {
    if (value > best) {
      best = value;
      best_epoch = epoch;
      since_improve = 0;
      return true;
    }
    ++since_improve;
    return false;
  }
  bool should_stop() const { return since_improve >= patience; }
};

// ---- patch stores ----

struct TrainPatch {
  BinaryImage bin;           // binarized patch: augmentation + HOG targets
  std::vector<float> input;  // channels x 32 x 32, values in [0,1]
  std::vector<float> target; // 64 x target_dim rows (fixed at build time)
  std::string id;
  int label = -1;
};

struct PatchStore {
  int channels = 1;
  int target_dim = 9;
  std::vector<TrainPatch> patches;
};

int target_dim_for(const PipelineConfig& cfg);

// Builds the model input and the reconstruction target for one sampled
// patch. `rgb` may be null for grayscale corpora.
TrainPatch make_train_patch(const GrayImage& gray, const RgbImage* rgb, const BinaryImage& bin,
                            const PipelineConfig& cfg, std::string id, int label = -1);

BinaryImage binarize(const GrayImage& img, const PipelineConfig& cfg);

// ---- pretraining ----

struct PretrainResult {
  ad::MaeP<float> model;
  std::vector<double> epoch_loss;
  int skipped_steps = 0;
};

// Core loop over a fixed patch set: shuffled batches, fresh mask plans and
// input augmentation every epoch, clipped AdamW with cosine-warmup schedule.
// Deterministic for a given seed. log_csv rows: epoch,split,loss,map,lr.
PretrainResult pretrain_patches(const PatchStore& store, const PipelineConfig& cfg, uint64_t seed,
                                std::ostream* log_csv = nullptr,
                                const std::string& checkpoint_dir = "");

// Full-page pipeline: per epoch and page, random crop, keypoints, patch
// sampling and augmentation feed the same step executor.
PretrainResult pretrain_manifest(const Manifest& manifest, const std::string& manifest_dir,
                                 const PipelineConfig& cfg, uint64_t seed,
                                 std::ostream* log_csv = nullptr,
                                 const std::string& checkpoint_dir = "");

// ---- finetuning ----

struct ValidationPage {
  std::string page_id;
  std::string writer_id;
  std::vector<std::vector<float>> patch_inputs;  // channels x 32 x 32 each
};

struct FinetuneResult {
  ad::MaeP<float> model;
  ad::RvladP<float> head;
  std::vector<double> val_map;
  int best_epoch = -1;
  double best_map = 0.0;
  int skipped_steps = 0;
};

// Metric-learning finetuning with the NetRVLAD head: P x K batches,
// erosion/dilation and token dropout augmentation, per-epoch validation mAP
// with early stopping, optional frozen encoder. Labels come from the patch
// store (writer ids or pseudo-label clusters).
FinetuneResult finetune(const ad::MaeP<float>& init, const PipelineConfig& cfg,
                        const PatchStore& train, const std::vector<ValidationPage>& val_pages,
                        uint64_t seed, std::ostream* log_csv = nullptr);

// ---- encoding ----

// NetRVLAD encodings (one K*D unit vector per patch) for a set of patches
// under the frozen current weights; inference mode, no dropout.
std::vector<std::vector<float>> encode_patches(const ad::MaeP<float>& model,
                                               const ad::RvladP<float>& head,
                                               const std::vector<std::vector<float>>& patch_inputs,
                                               const PipelineConfig& cfg);

// Aggregated page descriptor (pre-whitening, unit norm).
std::vector<float> encode_page(const ad::MaeP<float>& model, const ad::RvladP<float>& head,
                               const std::vector<std::vector<float>>& patch_inputs,
                               const PipelineConfig& cfg);

// Leave-one-out writer-retrieval mAP over encoded pages.
double pages_map(const ad::MaeP<float>& model, const ad::RvladP<float>& head,
                 const std::vector<ValidationPage>& pages, const PipelineConfig& cfg);

// ---- checkpoint helpers ----

ad::Checkpoint make_model_checkpoint(ad::MaeP<float>& model, ad::RvladP<float>* head,
                                     const PipelineConfig& cfg, const std::string& stage);
void load_model_checkpoint(const ad::Checkpoint& ckpt, ad::MaeP<float>& model,
                           ad::RvladP<float>* head);

}  // namespace saghog
