#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "saghog/graph.hpp"

namespace saghog::ad {

struct ViTConfig {
  int patch = 4;          // token patch size on the 32x32 input
  int dim = 512;          // encoder embedding size
  int depth = 8;
  int decoder_dim = 256;
  int decoder_depth = 1;
  int mlp_ratio = 4;
  int channels = 3;       // 1 or 3
  double mask_ratio = 0.75;
  int target_dim = 9;     // 9-bin HOG by default; patch*patch*channels for pixel targets

  int heads() const { return std::max(1, dim / 64); }
  int tokens_per_side() const { return 32 / patch; }
  int num_tokens() const { return tokens_per_side() * tokens_per_side(); }  // 64
  int token_input_dim() const { return patch * patch * channels; }
  int head_dim() const { return dim / heads(); }

  void validate() const {
    if (patch < 1 || 32 % patch != 0) throw std::invalid_argument("ViTConfig: 32 must be divisible by patch");
    if (dim % heads() != 0) throw std::invalid_argument("ViTConfig: dim must be divisible by heads");
    if (channels != 1 && channels != 3) throw std::invalid_argument("ViTConfig: channels must be 1 or 3");
  }
};

enum class RvladMode { ClassToken, Tokens };

inline int round_half_away(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Partition of the 64 patch-token indices; the class token is never masked.
struct MaskPlan {
  std::vector<int> visible;
  std::vector<int> masked;
  double ratio = 0.75;
};

inline MaskPlan plan_mask(Rng& rng, double ratio = 0.75, int num_tokens = 64) {
  if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("plan_mask: ratio must be in (0,1)");
  const int n_masked = round_half_away(ratio * num_tokens);
  std::vector<int> order(num_tokens);
  for (int i = 0; i < num_tokens; ++i) order[i] = i;
  rng.shuffle(order);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.masked.assign(order.begin(), order.begin() + n_masked);
  plan.visible.assign(order.begin() + n_masked, order.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

// Finetuning-only augmentation: each non-class token is removed independently
// with probability p; returns the kept token indices in order.
inline std::vector<int> token_dropout(int num_tokens, double p, Rng& rng) {
  std::vector<int> kept;
  kept.reserve(num_tokens);
  for (int i = 0; i < num_tokens; ++i)
    if (!rng.bernoulli(p)) kept.push_back(i);
  if (kept.empty()) kept.push_back(static_cast<int>(rng.uniform_below(num_tokens)));
  return kept;
}

// ---- parameter structs (values) and their graph bindings (node ids) ----

template <class T>
struct LinearP {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]
};

template <class T>
struct LayerNormP {
  Tensor<T> g;
  Tensor<T> b;
};

template <class T>
struct BlockP {
  LayerNormP<T> ln1;
  LinearP<T> wq, wk, wv, wo;
  LayerNormP<T> ln2;
  LinearP<T> fc1, fc2;
};

template <class T>
struct MaeP {
  ViTConfig cfg;
  LinearP<T> proj;        // token embedding
  Tensor<T> cls;          // [1, dim]
  Tensor<T> pos;          // [num_tokens + 1, dim]
  std::vector<BlockP<T>> blocks;
  LayerNormP<T> norm;
  LinearP<T> dec_embed;   // dim -> decoder_dim
  Tensor<T> mask_token;   // [1, decoder_dim]
  Tensor<T> dec_pos;      // [num_tokens + 1, decoder_dim]
  std::vector<BlockP<T>> dec_blocks;
  LayerNormP<T> dec_norm;
  LinearP<T> head;        // decoder_dim -> 9
};

template <class T>
struct RvladP {
  Tensor<T> w;  // [dim, clusters]
  Tensor<T> b;  // [clusters]
  int clusters = 100;
  RvladMode mode = RvladMode::ClassToken;
};

struct LinearB {
  int32_t w = -1, b = -1;
};
struct LayerNormB {
  int32_t g = -1, b = -1;
};
struct BlockB {
  LayerNormB ln1;
  LinearB wq, wk, wv, wo;
  LayerNormB ln2;
  LinearB fc1, fc2;
};
struct MaeB {
  LinearB proj;
  int32_t cls = -1, pos = -1;
  std::vector<BlockB> blocks;
  LayerNormB norm;
  LinearB dec_embed;
  int32_t mask_token = -1, dec_pos = -1;
  std::vector<BlockB> dec_blocks;
  LayerNormB dec_norm;
  LinearB head;
};
struct RvladB {
  int32_t w = -1, b = -1;
};

// ---- initialization ----

template <class T>
LinearP<T> init_linear(int in, int out, Rng& rng, double stddev = 0.02) {
  return {Tensor<T>::randn({in, out}, rng, stddev), Tensor<T>::zeros({out})};
}

template <class T>
LayerNormP<T> init_layer_norm(int dim) {
  return {Tensor<T>::full({dim}, T(1)), Tensor<T>::zeros({dim})};
}

template <class T>
BlockP<T> init_block(int dim, int mlp_ratio, Rng& rng) {
  BlockP<T> b;
  b.ln1 = init_layer_norm<T>(dim);
  b.wq = init_linear<T>(dim, dim, rng);
  b.wk = init_linear<T>(dim, dim, rng);
  b.wv = init_linear<T>(dim, dim, rng);
  b.wo = init_linear<T>(dim, dim, rng);
  b.ln2 = init_layer_norm<T>(dim);
  b.fc1 = init_linear<T>(dim, dim * mlp_ratio, rng);
  b.fc2 = init_linear<T>(dim * mlp_ratio, dim, rng);
  return b;
}

template <class T>
MaeP<T> init_mae(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  MaeP<T> m;
  m.cfg = cfg;
  m.proj = init_linear<T>(cfg.token_input_dim(), cfg.dim, rng);
  m.cls = Tensor<T>::randn({1, cfg.dim}, rng, 0.02);
  m.pos = Tensor<T>::randn({cfg.num_tokens() + 1, cfg.dim}, rng, 0.02);
  for (int i = 0; i < cfg.depth; ++i) m.blocks.push_back(init_block<T>(cfg.dim, cfg.mlp_ratio, rng));
  m.norm = init_layer_norm<T>(cfg.dim);
  m.dec_embed = init_linear<T>(cfg.dim, cfg.decoder_dim, rng);
  m.mask_token = Tensor<T>::randn({1, cfg.decoder_dim}, rng, 0.02);
  m.dec_pos = Tensor<T>::randn({cfg.num_tokens() + 1, cfg.decoder_dim}, rng, 0.02);
  for (int i = 0; i < cfg.decoder_depth; ++i)
    m.dec_blocks.push_back(init_block<T>(cfg.decoder_dim, cfg.mlp_ratio, rng));
  m.dec_norm = init_layer_norm<T>(cfg.decoder_dim);
  m.head = init_linear<T>(cfg.decoder_dim, cfg.target_dim, rng);
  return m;
}

template <class T>
RvladP<T> init_rvlad(int dim, int clusters, RvladMode mode, Rng& rng) {
  RvladP<T> r;
  r.w = Tensor<T>::randn({dim, clusters}, rng, 0.02);
  r.b = Tensor<T>::zeros({clusters});
  r.clusters = clusters;
  r.mode = mode;
  return r;
}

// Learnable tensor count for a configuration (encoder + decoder + head).
inline int64_t param_count(const ViTConfig& cfg, int rvlad_clusters = 0) {
  const int64_t d = cfg.dim, dd = cfg.decoder_dim, r = cfg.mlp_ratio;
  const int64_t n1 = cfg.num_tokens() + 1;
  auto block = [&](int64_t dim) {
    return 2 * dim                    // ln1
           + 4 * (dim * dim + dim)    // q, k, v, o
           + 2 * dim                  // ln2
           + dim * (r * dim) + r * dim + (r * dim) * dim + dim;
  };
  int64_t total = cfg.token_input_dim() * d + d;  // proj
  total += d;                                     // cls
  total += n1 * d;                                // pos
  total += cfg.depth * block(d);
  total += 2 * d;                                 // final norm
  total += d * dd + dd;                           // decoder embed
  total += dd;                                    // mask token
  total += n1 * dd;                               // decoder pos
  total += cfg.decoder_depth * block(dd);
  total += 2 * dd;                                // decoder norm
  total += dd * cfg.target_dim + cfg.target_dim;  // prediction head
  if (rvlad_clusters > 0) total += d * rvlad_clusters + rvlad_clusters;
  return total;
}

inline int64_t encoder_param_count(const ViTConfig& cfg) {
  const int64_t d = cfg.dim, r = cfg.mlp_ratio;
  const int64_t n1 = cfg.num_tokens() + 1;
  const int64_t block = 2 * d + 4 * (d * d + d) + 2 * d + d * (r * d) + r * d + (r * d) * d + d;
  return cfg.token_input_dim() * d + d + d + n1 * d + cfg.depth * block + 2 * d;
}

// ---- parameter enumeration (checkpoints, optimizer) ----

template <class T, class Fn>
void visit_linear(LinearP<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w", p.w);
  fn(prefix + ".b", p.b);
}

template <class T, class Fn>
void visit_layer_norm(LayerNormP<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".g", p.g);
  fn(prefix + ".b", p.b);
}

template <class T, class Fn>
void visit_block(BlockP<T>& p, const std::string& prefix, Fn&& fn) {
  visit_layer_norm(p.ln1, prefix + ".ln1", fn);
  visit_linear(p.wq, prefix + ".wq", fn);
  visit_linear(p.wk, prefix + ".wk", fn);
  visit_linear(p.wv, prefix + ".wv", fn);
  visit_linear(p.wo, prefix + ".wo", fn);
  visit_layer_norm(p.ln2, prefix + ".ln2", fn);
  visit_linear(p.fc1, prefix + ".fc1", fn);
  visit_linear(p.fc2, prefix + ".fc2", fn);
}

template <class T, class Fn>
void visit_mae(MaeP<T>& m, Fn&& fn) {
  visit_linear(m.proj, "enc.proj", fn);
  fn("enc.cls", m.cls);
  fn("enc.pos", m.pos);
  for (size_t i = 0; i < m.blocks.size(); ++i) visit_block(m.blocks[i], "enc.block" + std::to_string(i), fn);
  visit_layer_norm(m.norm, "enc.norm", fn);
  visit_linear(m.dec_embed, "dec.embed", fn);
  fn("dec.mask_token", m.mask_token);
  fn("dec.pos", m.dec_pos);
  for (size_t i = 0; i < m.dec_blocks.size(); ++i)
    visit_block(m.dec_blocks[i], "dec.block" + std::to_string(i), fn);
  visit_layer_norm(m.dec_norm, "dec.norm", fn);
  visit_linear(m.head, "dec.head", fn);
}

template <class T, class Fn>
void visit_rvlad(RvladP<T>& r, Fn&& fn) {
  fn("rvlad.w", r.w);
  fn("rvlad.b", r.b);
}

// ---- graph binding ----

template <class T>
LinearB bind_linear(Graph<T>& g, const LinearP<T>& p, bool rg) {
  return {g.input(p.w, rg), g.input(p.b, rg)};
}

template <class T>
LayerNormB bind_layer_norm(Graph<T>& g, const LayerNormP<T>& p, bool rg) {
  return {g.input(p.g, rg), g.input(p.b, rg)};
}

template <class T>
BlockB bind_block(Graph<T>& g, const BlockP<T>& p, bool rg) {
  BlockB b;
  b.ln1 = bind_layer_norm(g, p.ln1, rg);
  b.wq = bind_linear(g, p.wq, rg);
  b.wk = bind_linear(g, p.wk, rg);
  b.wv = bind_linear(g, p.wv, rg);
  b.wo = bind_linear(g, p.wo, rg);
  b.ln2 = bind_layer_norm(g, p.ln2, rg);
  b.fc1 = bind_linear(g, p.fc1, rg);
  b.fc2 = bind_linear(g, p.fc2, rg);
  return b;
}

template <class T>
MaeB bind_mae(Graph<T>& g, const MaeP<T>& m, bool encoder_rg, bool decoder_rg) {
  MaeB b;
  b.proj = bind_linear(g, m.proj, encoder_rg);
  b.cls = g.input(m.cls, encoder_rg);
  b.pos = g.input(m.pos, encoder_rg);
  for (const auto& blk : m.blocks) b.blocks.push_back(bind_block(g, blk, encoder_rg));
  b.norm = bind_layer_norm(g, m.norm, encoder_rg);
  b.dec_embed = bind_linear(g, m.dec_embed, decoder_rg);
  b.mask_token = g.input(m.mask_token, decoder_rg);
  b.dec_pos = g.input(m.dec_pos, decoder_rg);
  for (const auto& blk : m.dec_blocks) b.dec_blocks.push_back(bind_block(g, blk, decoder_rg));
  b.dec_norm = bind_layer_norm(g, m.dec_norm, decoder_rg);
  b.head = bind_linear(g, m.head, decoder_rg);
  return b;
}

template <class T>
RvladB bind_rvlad(Graph<T>& g, const RvladP<T>& p, bool rg) {
  return {g.input(p.w, rg), g.input(p.b, rg)};
}

// ---- forward builders ----

template <class T>
int32_t linear_forward(Graph<T>& g, const LinearB& lin, int32_t x) {
  return g.add(g.matmul(x, lin.w), lin.b);
}

// Pre-norm transformer stack over [B, N, dim] with a final layer norm.
template <class T>
int32_t encoder_forward(Graph<T>& g, const std::vector<BlockB>& blocks, const LayerNormB& norm,
                        int32_t x, int dim, int heads) {
  const auto shape = g.value(x).shape;
  const int b = shape[0], n = shape[1];
  const int dh = dim / heads;
  const T att_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

  for (const auto& blk : blocks) {
    auto h = g.layer_norm(x, blk.ln1.g, blk.ln1.b);
    auto flat = g.reshape(h, {b * n, dim});
    auto split_heads = [&](const LinearB& lin) {
      auto y = linear_forward(g, lin, flat);
      y = g.reshape(y, {b, n, heads, dh});
      return g.permute(y, {0, 2, 1, 3});  // [B, H, N, dh]
    };
    auto q = split_heads(blk.wq);
    auto k = split_heads(blk.wk);
    auto v = split_heads(blk.wv);
    auto att = g.scale(g.matmul(q, g.transpose_last(k)), att_scale);
    auto p = g.softmax_lastdim(att);
    auto o = g.matmul(p, v);                      // [B, H, N, dh]
    o = g.permute(o, {0, 2, 1, 3});               // [B, N, H, dh]
    o = g.reshape(o, {b * n, dim});
    o = linear_forward(g, blk.wo, o);
    x = g.add(x, g.reshape(o, {b, n, dim}));

    auto h2 = g.layer_norm(x, blk.ln2.g, blk.ln2.b);
    auto m = g.reshape(h2, {b * n, dim});
    m = g.gelu(linear_forward(g, blk.fc1, m));
    m = linear_forward(g, blk.fc2, m);
    x = g.add(x, g.reshape(m, {b, n, dim}));
  }
  return g.layer_norm(x, norm.g, norm.b);
}

// Projects token rows, prepends the class token, adds position embeddings and
// keeps only the class token plus `kept[i]` patch tokens per sample. All
// samples in one call must keep the same number of tokens.
template <class T>
int32_t embed_and_select(Graph<T>& g, const MaeB& mb, const ViTConfig& cfg, int32_t token_rows,
                         const std::vector<std::vector<int>>& kept) {
  const int nt = cfg.num_tokens();
  const int b = static_cast<int>(kept.size());
  const size_t n_keep = kept[0].size();
  auto proj = linear_forward(g, mb.proj, token_rows);  // [B*64, D]
  auto full = g.concat_rows(std::array{mb.cls, proj});
  std::vector<int> seq_idx(static_cast<size_t>(b) * (nt + 1));
  for (int i = 0; i < b; ++i) {
    seq_idx[static_cast<size_t>(i) * (nt + 1)] = 0;  // class token row
    for (int t = 0; t < nt; ++t)
      seq_idx[static_cast<size_t>(i) * (nt + 1) + 1 + t] = 1 + i * nt + t;
  }
  auto seq = g.reshape(g.gather_rows(full, std::move(seq_idx)), {b, nt + 1, cfg.dim});
  seq = g.add(seq, mb.pos);  // [65, D] broadcast over batch

  std::vector<int> vis_idx;
  vis_idx.reserve(static_cast<size_t>(b) * (n_keep + 1));
  for (int i = 0; i < b; ++i) {
    if (kept[i].size() != n_keep)
      throw std::invalid_argument("embed_and_select: ragged kept counts in one batch");
    vis_idx.push_back(i * (nt + 1));
    for (int t : kept[i]) vis_idx.push_back(i * (nt + 1) + 1 + t);
  }
  auto flat = g.reshape(seq, {b * (nt + 1), cfg.dim});
  return g.reshape(g.gather_rows(flat, std::move(vis_idx)),
                   {b, static_cast<int>(n_keep) + 1, cfg.dim});
}

struct MaePrediction {
  int32_t predictions = -1;          // [B * n_masked, target_dim]
  std::vector<int> masked_rows;      // flat (sample * 64 + token) per prediction row
};

// Full masked-autoencoder pass: encode visible tokens, rebuild the sequence
// with the shared mask token, decode, and report 9-vector predictions at the
// masked positions.
template <class T>
MaePrediction mae_forward(Graph<T>& g, const MaeB& mb, const ViTConfig& cfg, int32_t token_rows,
                          const std::vector<MaskPlan>& plans) {
  const int nt = cfg.num_tokens();
  const int b = static_cast<int>(plans.size());
  std::vector<std::vector<int>> kept(b);
  for (int i = 0; i < b; ++i) kept[i] = plans[i].visible;
  const int nv = static_cast<int>(kept[0].size());

  auto vis = embed_and_select(g, mb, cfg, token_rows, kept);  // [B, nv+1, D]
  auto enc = encoder_forward(g, mb.blocks, mb.norm, vis, cfg.dim, cfg.heads());

  auto enc_flat = g.reshape(enc, {b * (nv + 1), cfg.dim});
  auto dec_in = linear_forward(g, mb.dec_embed, enc_flat);           // [B*(nv+1), Dd]
  auto with_mask = g.concat_rows(std::array{dec_in, mb.mask_token});
  const int mask_row = b * (nv + 1);

  std::vector<int> dec_idx(static_cast<size_t>(b) * (nt + 1), mask_row);
  for (int i = 0; i < b; ++i) {
    dec_idx[static_cast<size_t>(i) * (nt + 1)] = i * (nv + 1);  // class token
    for (int r = 0; r < nv; ++r)
      dec_idx[static_cast<size_t>(i) * (nt + 1) + 1 + plans[i].visible[r]] = i * (nv + 1) + 1 + r;
  }
  auto dec_seq = g.reshape(g.gather_rows(with_mask, std::move(dec_idx)), {b, nt + 1, cfg.decoder_dim});
  dec_seq = g.add(dec_seq, mb.dec_pos);
  auto dec = encoder_forward(g, mb.dec_blocks, mb.dec_norm, dec_seq, cfg.decoder_dim,
                             std::max(1, cfg.decoder_dim / 64));
  auto dec_flat = g.reshape(dec, {b * (nt + 1), cfg.decoder_dim});
  auto preds_all = linear_forward(g, mb.head, dec_flat);  // [B*(nt+1), target_dim]

  MaePrediction out;
  std::vector<int> pred_idx;
  for (int i = 0; i < b; ++i)
    for (int t : plans[i].masked) {
      pred_idx.push_back(i * (nt + 1) + 1 + t);
      out.masked_rows.push_back(i * nt + t);
    }
  out.predictions = g.gather_rows(preds_all, std::move(pred_idx));
  return out;
}

// Soft-assignment VLAD without residual subtraction: a_k = softmax(Wx + b),
// V_k = sum_i a_k(x_i) x_i, per-cluster l2 norm, concat, global l2 norm.
template <class T>
int32_t netrvlad_forward(Graph<T>& g, const RvladB& rb, int32_t tokens, int clusters) {
  const auto shape = g.value(tokens).shape;
  SAGHOG_CHECK_SHAPES(shape.size() == 3, "netrvlad_forward", g.value(tokens).shape_str(), "[B,N,D]");
  const int b = shape[0], n = shape[1], d = shape[2];
  auto flat = g.reshape(tokens, {b * n, d});
  auto logits = g.add(g.matmul(flat, rb.w), rb.b);
  auto assign = g.softmax_lastdim(g.reshape(logits, {b, n, clusters}));
  auto vlad = g.matmul(g.transpose_last(assign), tokens);  // [B, K, D]
  vlad = l2_normalize_lastdim(g, vlad);
  auto out = g.reshape(vlad, {b, clusters * d});
  return l2_normalize_lastdim(g, out);
}

// Class-token slice ([B, 1, D]) or patch-token slice ([B, N-1, D]) of an
// encoded sequence, ready for the encoding head.
template <class T>
int32_t select_rvlad_input(Graph<T>& g, int32_t encoded, RvladMode mode) {
  const auto shape = g.value(encoded).shape;
  const int b = shape[0], n = shape[1], d = shape[2];
  auto flat = g.reshape(encoded, {b * n, d});
  std::vector<int> idx;
  if (mode == RvladMode::ClassToken) {
    for (int i = 0; i < b; ++i) idx.push_back(i * n);
    return g.reshape(g.gather_rows(flat, std::move(idx)), {b, 1, d});
  }
  for (int i = 0; i < b; ++i)
    for (int t = 1; t < n; ++t) idx.push_back(i * n + t);
  return g.reshape(g.gather_rows(flat, std::move(idx)), {b, n - 1, d});
}

// Rearranges a channel-major patch (C x 32 x 32, values in [0,1]) into
// token rows [64, patch*patch*C] in raster token order.
template <class T>
void patch_to_token_rows(const std::vector<T>& patch, const ViTConfig& cfg, T* out_rows) {
  const int side = cfg.tokens_per_side();
  const int p = cfg.patch;
  const int c = cfg.channels;
  for (int ty = 0; ty < side; ++ty)
    for (int tx = 0; tx < side; ++tx) {
      T* row = out_rows + (static_cast<size_t>(ty) * side + tx) * cfg.token_input_dim();
      size_t o = 0;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            row[o++] = patch[(static_cast<size_t>(ch) * 32 + (ty * p + py)) * 32 + (tx * p + px)];
    }
}

}  // namespace saghog::ad
