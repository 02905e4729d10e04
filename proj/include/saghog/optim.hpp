#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "saghog/tensor.hpp"

namespace saghog::ad {

// Named tensor record used by the checkpoint format.
struct Param {
  std::string name;
  Tensor<float> value;
  Tensor<float> m;
  Tensor<float> v;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay, applied multiplicatively before the moment update.
// Moment buffers live here, aligned with the caller's fixed parameter order.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  std::vector<Tensor<float>>& moments_m() { return m_; }
  std::vector<Tensor<float>>& moments_v() { return v_; }

  // Returns false and leaves parameters and state untouched when any
  // gradient entry is non-finite.
  bool step(const std::vector<Tensor<float>*>& params,
            const std::vector<const Tensor<float>*>& grads, double lr_override = -1.0) {
    if (params.size() != grads.size()) throw std::invalid_argument("AdamW: params/grads mismatch");
    for (const auto* g : grads)
      if (g)
        for (float x : g->v)
          if (!std::isfinite(x)) return false;

    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = Tensor<float>::zeros(params[i]->shape);
        v_[i] = Tensor<float>::zeros(params[i]->shape);
      }
    }

    const double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<float>& p = *params[pi];
      const Tensor<float>* g = grads[pi];
      for (size_t i = 0; i < p.v.size(); ++i) {
        double w = p.v[i];
        w *= 1.0 - lr * cfg_.weight_decay;
        const double gi = g ? g->v[i] : 0.0;
        const double m = cfg_.beta1 * m_[pi].v[i] + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * v_[pi].v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m_[pi].v[i] = static_cast<float>(m);
        v_[pi].v[i] = static_cast<float>(v);
        w -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p.v[i] = static_cast<float>(w);
      }
    }
    return true;
  }

 private:
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::vector<Tensor<float>> m_;
  std::vector<Tensor<float>> v_;
};

// Linear ramp to base_lr over the warmup, then half-cosine decay to zero.
// `epoch_pos` may be fractional (step / steps_per_epoch).
inline double cosine_warmup_lr(double epoch_pos, double warmup_epochs, double total_epochs,
                               double base_lr) {
  if (epoch_pos < 0.0) throw std::invalid_argument("cosine_warmup_lr: negative position");
  if (warmup_epochs > 0.0 && epoch_pos < warmup_epochs) return base_lr * epoch_pos / warmup_epochs;
  if (epoch_pos >= total_epochs) return 0.0;
  const double t = (epoch_pos - warmup_epochs) / (total_epochs - warmup_epochs);
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * t));
}

enum class ClipMode { GlobalNorm, PerValue };

// Global-norm mode scales every gradient by max_norm/g when the joint l2
// norm g exceeds max_norm; returns the pre-clip norm. Per-value mode clamps
// each entry to [-max_norm, max_norm].
inline double clip_gradients(const std::vector<Tensor<float>*>& grads, double max_norm,
                             ClipMode mode = ClipMode::GlobalNorm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  if (mode == ClipMode::PerValue) {
    for (auto* g : grads) {
      if (!g) continue;
      for (auto& x : g->v)
        x = static_cast<float>(std::clamp(static_cast<double>(x), -max_norm, max_norm));
    }
    return 0.0;
  }
  double norm_sq = 0.0;
  for (const auto* g : grads) {
    if (!g) continue;
    for (float x : g->v) norm_sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(norm_sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* g : grads) {
      if (!g) continue;
      for (auto& x : g->v) x = static_cast<float>(x * s);
    }
  }
  return norm;
}

}  // namespace saghog::ad
