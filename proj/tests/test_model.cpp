#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "saghog/model.hpp"

using namespace saghog;
using ad::Graph;
using ad::Tensor;
using Id = int32_t;

namespace {

ad::ViTConfig toy_config(int dim = 16, int depth = 2, int channels = 1) {
  ad::ViTConfig c;
  c.patch = 4;
  c.dim = dim;
  c.depth = depth;
  c.decoder_dim = 16;
  c.decoder_depth = 1;
  c.mlp_ratio = 2;
  c.channels = channels;
  return c;
}

std::vector<float> random_patch_values(const ad::ViTConfig& cfg, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(cfg.channels) * 1024);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return v;
}

}  // namespace

TEST_CASE("token geometry: 64 tokens plus class token") {
  ad::ViTConfig cfg = toy_config();
  CHECK(cfg.num_tokens() == 64);
  CHECK(cfg.tokens_per_side() == 8);
  CHECK(cfg.token_input_dim() == 16);

  Rng rng(3);
  ad::MaeP<float> model = ad::init_mae<float>(cfg, rng);
  Graph<float> g;
  const auto mb = ad::bind_mae(g, model, false, false);
  const auto patch = random_patch_values(cfg, rng);
  Tensor<float> rows({64, 16});
  ad::patch_to_token_rows(patch, cfg, rows.v.data());
  const Id tokens = g.input(rows, false);
  std::vector<int> all(64);
  std::iota(all.begin(), all.end(), 0);
  const Id seq = ad::embed_and_select(g, mb, cfg, tokens, {all});
  CHECK(g.value(seq).shape == std::vector<int>{1, 65, 16});
}

TEST_CASE("zero patch with zero projection gives the positional embeddings") {
  ad::ViTConfig cfg = toy_config();
  Rng rng(5);
  ad::MaeP<float> model = ad::init_mae<float>(cfg, rng);
  std::fill(model.proj.w.v.begin(), model.proj.w.v.end(), 0.f);
  std::fill(model.proj.b.v.begin(), model.proj.b.v.end(), 0.f);
  std::fill(model.cls.v.begin(), model.cls.v.end(), 0.f);

  Graph<float> g;
  const auto mb = ad::bind_mae(g, model, false, false);
  Tensor<float> rows = Tensor<float>::zeros({64, 16});
  const Id tokens = g.input(rows, false);
  std::vector<int> all(64);
  std::iota(all.begin(), all.end(), 0);
  const Id seq = ad::embed_and_select(g, mb, cfg, tokens, {all});
  const auto& v = g.value(seq);
  for (int t = 0; t < 65; ++t)
    for (int d = 0; d < 16; ++d)
      CHECK(v.v[static_cast<size_t>(t) * 16 + d] ==
            doctest::Approx(model.pos.v[static_cast<size_t>(t) * 16 + d]));
}

TEST_CASE("permuting two 4x4 blocks permutes the token rows") {
  ad::ViTConfig cfg = toy_config();
  Rng rng(7);
  auto patch = random_patch_values(cfg, rng);
  std::vector<float> swapped = patch;
  // swap blocks (0,0) and (3,2) in pixel space
  for (int py = 0; py < 4; ++py)
    for (int px = 0; px < 4; ++px) {
      const size_t a = static_cast<size_t>(0 * 4 + py) * 32 + (0 * 4 + px);
      const size_t b = static_cast<size_t>(3 * 4 + py) * 32 + (2 * 4 + px);
      std::swap(swapped[a], swapped[b]);
    }
  std::vector<float> rows_a(64 * 16), rows_b(64 * 16);
  ad::patch_to_token_rows(patch, cfg, rows_a.data());
  ad::patch_to_token_rows(swapped, cfg, rows_b.data());
  const int ta = 0 * 8 + 0, tb = 3 * 8 + 2;
  for (int d = 0; d < 16; ++d) {
    CHECK(rows_a[ta * 16 + d] == rows_b[tb * 16 + d]);
    CHECK(rows_a[tb * 16 + d] == rows_b[ta * 16 + d]);
  }
  // all other rows identical
  for (int t = 0; t < 64; ++t) {
    if (t == ta || t == tb) continue;
    for (int d = 0; d < 16; ++d) CHECK(rows_a[t * 16 + d] == rows_b[t * 16 + d]);
  }
}

TEST_CASE("plan_mask arithmetic and statistics") {
  Rng rng(11);
  const auto plan = ad::plan_mask(rng, 0.75);
  CHECK(plan.masked.size() == 48);
  CHECK(plan.visible.size() == 16);

  const auto plan90 = ad::plan_mask(rng, 0.90);
  CHECK(plan90.masked.size() == 58);  // round(57.6)

  // partition property
  std::set<int> all(plan.masked.begin(), plan.masked.end());
  all.insert(plan.visible.begin(), plan.visible.end());
  CHECK(all.size() == 64);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 63);

  // per-index masking frequency 0.75 +- 0.01 over 1e5 plans
  std::vector<int> hits(64, 0);
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) {
    const auto p = ad::plan_mask(rng, 0.75);
    for (int m : p.masked) ++hits[m];
  }
  for (int i = 0; i < 64; ++i) {
    const double freq = static_cast<double>(hits[i]) / trials;
    CHECK(std::abs(freq - 0.75) < 0.01);
  }

  CHECK_THROWS_AS(ad::plan_mask(rng, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ad::plan_mask(rng, 1.0), std::invalid_argument);
}

TEST_CASE("depth-0 encoder is the final layer norm of its input") {
  ad::ViTConfig cfg = toy_config(16, 0);
  Rng rng(13);
  ad::MaeP<float> model = ad::init_mae<float>(cfg, rng);
  Graph<float> g;
  const auto mb = ad::bind_mae(g, model, false, false);
  const Id x = g.input(Tensor<float>::randn({2, 5, 16}, rng), false);
  const Id enc = ad::encoder_forward(g, mb.blocks, mb.norm, x, cfg.dim, cfg.heads());
  const Id ln = g.layer_norm(x, mb.norm.g, mb.norm.b);
  for (size_t i = 0; i < g.value(enc).v.size(); ++i)
    CHECK(g.value(enc).v[i] == g.value(ln).v[i]);
}

TEST_CASE("attention rows sum to 1 after softmax") {
  Rng rng(17);
  Graph<float> g;
  const Id scores = g.input(Tensor<float>::randn({3, 2, 7, 7}, rng, 2.0), false);
  const auto& p = g.value(g.softmax_lastdim(scores));
  for (size_t r = 0; r < p.rows(); ++r) {
    double sum = 0;
    for (int i = 0; i < 7; ++i) sum += p.v[r * 7 + i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("decoder output shape and zero-weight bias case") {
  ad::ViTConfig cfg = toy_config();
  Rng rng(19);
  ad::MaeP<float> model = ad::init_mae<float>(cfg, rng);

  SUBCASE("predictions are (n_masked, target_dim) per sample") {
    Graph<float> g;
    const auto mb = ad::bind_mae(g, model, false, false);
    Rng mr(1);
    std::vector<ad::MaskPlan> plans = {ad::plan_mask(mr, 0.75), ad::plan_mask(mr, 0.75)};
    Tensor<float> rows = Tensor<float>::randn({2 * 64, 16}, rng, 0.3);
    const auto pred = ad::mae_forward(g, mb, cfg, g.input(rows, false), plans);
    CHECK(g.value(pred.predictions).shape == std::vector<int>{2 * 48, 9});
    CHECK(pred.masked_rows.size() == 2 * 48);
  }

  SUBCASE("zero decoder head weights make every prediction equal the bias") {
    std::fill(model.head.w.v.begin(), model.head.w.v.end(), 0.f);
    for (int i = 0; i < 9; ++i) model.head.b.v[i] = static_cast<float>(i) * 0.5f;
    Graph<float> g;
    const auto mb = ad::bind_mae(g, model, false, false);
    Rng mr(2);
    std::vector<ad::MaskPlan> plans = {ad::plan_mask(mr, 0.75)};
    Tensor<float> rows = Tensor<float>::randn({64, 16}, rng, 0.3);
    const auto pred = ad::mae_forward(g, mb, cfg, g.input(rows, false), plans);
    const auto& v = g.value(pred.predictions);
    for (int r = 0; r < 48; ++r)
      for (int c = 0; c < 9; ++c)
        CHECK(v.v[static_cast<size_t>(r) * 9 + c] == doctest::Approx(0.5f * c));
  }
}

TEST_CASE("prediction at a masked position ignores other mask-token ordering") {
  // the shared mask token is identical at every masked slot, so swapping two
  // other masked positions cannot change a third prediction; verify by
  // comparing two plans listing the same masked set
  ad::ViTConfig cfg = toy_config();
  Rng rng(23);
  ad::MaeP<float> model = ad::init_mae<float>(cfg, rng);
  Rng mr(3);
  const auto plan = ad::plan_mask(mr, 0.75);

  auto run = [&](const ad::MaskPlan& p) {
    Graph<float> g;
    const auto mb = ad::bind_mae(g, model, false, false);
    Rng pr(9);
    Tensor<float> rows = Tensor<float>::randn({64, 16}, pr, 0.3);
    const auto pred = ad::mae_forward(g, mb, cfg, g.input(rows, false), {p});
    return g.value(pred.predictions).v;
  };

  const auto base = run(plan);
  ad::MaskPlan swapped = plan;
  std::swap(swapped.masked[0], swapped.masked[1]);  // same set, different listing order
  const auto swapped_out = run(swapped);
  // prediction rows follow the listed order; compare as (position -> row)
  for (size_t r = 0; r < plan.masked.size(); ++r) {
    const int pos = plan.masked[r];
    size_t r2 = 0;
    while (swapped.masked[r2] != pos) ++r2;
    for (int c = 0; c < 9; ++c) CHECK(base[r * 9 + c] == swapped_out[r2 * 9 + c]);
  }
}

TEST_CASE("netrvlad: hand-evaluated two-cluster case") {
  // one descriptor, two clusters, assignment forced to (1, 0): the encoding
  // is [x / ||x||, 0] after intra- and global normalization
  const int d = 4, k = 2;
  ad::RvladP<float> head;
  head.clusters = k;
  head.mode = ad::RvladMode::Tokens;
  head.w = Tensor<float>::zeros({d, k});
  head.b = Tensor<float>({k}, {50.f, -50.f});  // softmax saturates to (1, 0)

  Tensor<float> x({1, 1, d}, {0.5f, -1.0f, 2.0f, 0.25f});
  Graph<float> g;
  const auto rb = ad::bind_rvlad(g, head, false);
  const Id out = ad::netrvlad_forward(g, rb, g.input(x, false), k);
  const auto& v = g.value(out);
  REQUIRE(v.shape == std::vector<int>{1, k * d});

  double norm = 0;
  for (int i = 0; i < d; ++i) norm += static_cast<double>(x.v[i]) * x.v[i];
  norm = std::sqrt(norm);
  for (int i = 0; i < d; ++i) CHECK(v.v[i] == doctest::Approx(x.v[i] / norm).epsilon(1e-5));
  for (int i = d; i < 2 * d; ++i) CHECK(std::abs(v.v[i]) < 1e-6);
}

TEST_CASE("netrvlad output is unit norm and permutation invariant") {
  Rng rng(29);
  const int d = 8, k = 3, n = 6;
  ad::RvladP<float> head = ad::init_rvlad<float>(d, k, ad::RvladMode::Tokens, rng);

  Tensor<float> x = Tensor<float>::randn({1, n, d}, rng);
  Graph<float> g;
  const auto rb = ad::bind_rvlad(g, head, false);
  const auto& v = g.value(ad::netrvlad_forward(g, rb, g.input(x, false), k));
  double norm = 0;
  for (float e : v.v) norm += static_cast<double>(e) * e;
  CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);

  // permute the descriptor set
  Tensor<float> xp(x.shape);
  const std::vector<int> perm = {4, 0, 5, 2, 1, 3};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) xp.v[static_cast<size_t>(i) * d + j] = x.v[static_cast<size_t>(perm[i]) * d + j];
  Graph<float> g2;
  const auto rb2 = ad::bind_rvlad(g2, head, false);
  const auto& vp = g2.value(ad::netrvlad_forward(g2, rb2, g2.input(xp, false), k));
  for (size_t i = 0; i < v.v.size(); ++i) CHECK(v.v[i] == doctest::Approx(vp.v[i]).epsilon(1e-5));
}

TEST_CASE("token dropout: identity at p=0, class token retention, binomial mean") {
  Rng rng(31);
  const auto kept0 = ad::token_dropout(64, 0.0, rng);
  CHECK(kept0.size() == 64);

  // the kept list never includes a class token because dropout operates on
  // patch tokens only; expected kept count is 64 * 0.9 within 1%
  int64_t total = 0;
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) total += static_cast<int64_t>(ad::token_dropout(64, 0.1, rng).size());
  const double mean = static_cast<double>(total) / trials;
  CHECK(std::abs(mean - 57.6) < 0.576);
  for (int t = 0; t < 100; ++t) {
    const auto kept = ad::token_dropout(64, 0.1, rng);
    CHECK(!kept.empty());
    for (int v : kept) {
      CHECK(v >= 0);
      CHECK(v < 64);
    }
  }
}

TEST_CASE("parameter count is a pure function of the configuration") {
  ad::ViTConfig a = toy_config(64, 2);
  ad::ViTConfig b = a;
  b.decoder_depth = 3;
  CHECK(ad::encoder_param_count(a) == ad::encoder_param_count(b));
  CHECK(ad::param_count(b) > ad::param_count(a));

  // the arithmetic matches the actual tensor allocation
  Rng rng(37);
  ad::MaeP<float> model = ad::init_mae<float>(a, rng);
  int64_t total = 0;
  ad::visit_mae(model, [&](const std::string&, Tensor<float>& t) { total += static_cast<int64_t>(t.numel()); });
  CHECK(total == ad::param_count(a));

  ad::RvladP<float> head = ad::init_rvlad<float>(a.dim, 10, ad::RvladMode::ClassToken, rng);
  int64_t with_head = total;
  ad::visit_rvlad(head, [&](const std::string&, Tensor<float>& t) { with_head += static_cast<int64_t>(t.numel()); });
  CHECK(with_head == ad::param_count(a, 10));
}

TEST_CASE("full pipeline gradient check at toy dimensions") {
  ad::ViTConfig cfg = toy_config(16, 2);
  Rng rng(41);
  ad::MaeP<double> model = ad::init_mae<double>(cfg, rng);
  Rng mr(4);
  const std::vector<ad::MaskPlan> plans = {ad::plan_mask(mr, 0.75)};
  const Tensor<double> rows = Tensor<double>::randn({64, 16}, rng, 0.5);
  const Tensor<double> targets = Tensor<double>::randn({48, 9}, rng, 0.5);

  auto loss_of = [&](ad::MaeP<double>& m, bool with_grad) {
    Graph<double> g;
    const auto mb = ad::bind_mae(g, m, with_grad, with_grad);
    const auto pred = ad::mae_forward(g, mb, cfg, g.input(rows, false), plans);
    const Id loss = ad::mse_loss(g, pred.predictions, g.input(targets, false));
    if (with_grad) g.backward(loss);
    return std::pair{g.value(loss).v[0], std::move(g)};
  };

  auto [base_loss, g] = loss_of(model, true);
  (void)base_loss;

  // spot-check a handful of parameters of each kind against central differences
  struct Probe {
    double* ptr;
    double analytic;
  };
  std::vector<Probe> probes;
  {
    Graph<double> gg;
    const auto mb = ad::bind_mae(gg, model, true, true);
    const auto pred = ad::mae_forward(gg, mb, cfg, gg.input(rows, false), plans);
    const Id loss = ad::mse_loss(gg, pred.predictions, gg.input(targets, false));
    gg.backward(loss);
    auto pick = [&](Tensor<double>& t, Id bound, size_t idx) {
      probes.push_back({&t.v[idx], gg.grad(bound).v.empty() ? 0.0 : gg.grad(bound).v[idx]});
    };
    pick(model.proj.w, mb.proj.w, 3);
    pick(model.cls, mb.cls, 1);
    pick(model.pos, mb.pos, 20);
    pick(model.blocks[0].wq.w, mb.blocks[0].wq.w, 7);
    pick(model.blocks[1].fc1.w, mb.blocks[1].fc1.w, 11);
    pick(model.blocks[0].ln1.g, mb.blocks[0].ln1.g, 2);
    pick(model.dec_embed.w, mb.dec_embed.w, 5);
    pick(model.mask_token, mb.mask_token, 3);
    pick(model.dec_blocks[0].wv.w, mb.dec_blocks[0].wv.w, 9);
    pick(model.head.w, mb.head.w, 4);
    pick(model.norm.g, mb.norm.g, 0);
    pick(model.dec_pos, mb.dec_pos, 33);
  }
  const double h = 1e-5;
  for (const auto& probe : probes) {
    const double orig = *probe.ptr;
    *probe.ptr = orig + h;
    const double up = loss_of(model, false).first;
    *probe.ptr = orig - h;
    const double down = loss_of(model, false).first;
    *probe.ptr = orig;
    const double numeric = (up - down) / (2 * h);
    const double rel =
        std::abs(probe.analytic - numeric) / std::max({std::abs(probe.analytic), std::abs(numeric), 1e-6});
    CHECK(rel < 1e-4);
  }
}
