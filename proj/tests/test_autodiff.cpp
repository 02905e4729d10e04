#include <cmath>
#include <functional>

#include "doctest.h"
#include "saghog/checkpoint.hpp"
#include "saghog/graph.hpp"
#include "saghog/model.hpp"
#include "saghog/optim.hpp"

using namespace saghog;
using ad::Graph;
using ad::Tensor;
using Id = int32_t;

namespace {

// Central-difference check of d(scalar f)/d(inputs) for a graph builder.
// Inputs are double tensors; the builder must consume them in order and
// return a scalar node.
struct GradCheck {
  double max_rel_error = 0.0;

  void run(std::vector<Tensor<double>> inputs,
           const std::function<Id(Graph<double>&, const std::vector<Id>&)>& build,
           double h = 1e-5) {
    Graph<double> g;
    std::vector<Id> ids;
    for (auto& t : inputs) ids.push_back(g.input(t, true));
    const Id out = build(g, ids);
    REQUIRE(g.value(out).numel() == 1);
    g.backward(out);

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
      Graph<double> g2;
      std::vector<Id> ids2;
      for (const auto& t : xs) ids2.push_back(g2.input(t, false));
      return g2.value(build(g2, ids2)).v[0];
    };

    for (size_t ti = 0; ti < inputs.size(); ++ti) {
      const auto& analytic = g.grad(ids[ti]);
      for (size_t i = 0; i < inputs[ti].v.size(); ++i) {
        auto plus = inputs;
        plus[ti].v[i] += h;
        auto minus = inputs;
        minus[ti].v[i] -= h;
        const double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        const double a = analytic.v.empty() ? 0.0 : analytic.v[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        max_rel_error = std::max(max_rel_error, rel);
        CHECK(rel < 1e-4);
      }
    }
  }
};

Tensor<double> rand_t(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  return Tensor<double>::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("forward basics: identity matmul, softmax of constants") {
  Graph<float> g;
  Tensor<float> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.v[i * 3 + i] = 1.f;
  Rng rng(1);
  const auto x = Tensor<float>::randn({3, 3}, rng);
  const Id xi = g.input(x, true);
  const Id prod = g.matmul(g.input(eye, false), xi);
  for (size_t i = 0; i < x.v.size(); ++i) CHECK(g.value(prod).v[i] == doctest::Approx(x.v[i]));

  // gradient of sum(I * X) wrt X is all ones
  g.backward(g.sum_all(prod));
  for (float v : g.grad(xi).v) CHECK(v == doctest::Approx(1.f));

  Graph<float> g2;
  const Id c = g2.input(Tensor<float>::full({5}, 2.5f), false);
  const auto sm = g2.value(g2.softmax_lastdim(c));
  for (float v : sm.v) CHECK(v == doctest::Approx(0.2f));
}

TEST_CASE("gradient check: every op at random points") {
  Rng rng(7);
  GradCheck gc;
  for (int trial = 0; trial < 10; ++trial) {
    gc.run({rand_t({2, 3}, rng), rand_t({2, 3}, rng)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             return g.sum_all(g.mul(g.add(in[0], in[1]), g.sub(in[0], in[1])));
           });
    gc.run({rand_t({2, 3, 4}, rng), rand_t({4}, rng, 0.5)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             return g.sum_all(g.div(in[0], g.add_const(g.mul(in[1], in[1]), 1.0)));
           });
    gc.run({rand_t({3, 4}, rng), rand_t({3, 1}, rng)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             return g.sum_all(g.mul(in[0], in[1]));
           });
    gc.run({rand_t({5}, rng, 0.3)}, [](Graph<double>& g, const std::vector<Id>& in) {
      const auto sq = g.pow_const(g.add_const(g.mul(in[0], in[0]), 0.7), 0.5);
      return g.sum_all(g.log_(g.add_const(g.exp_(g.scale(sq, -1.3)), 1.0)));
    });
    gc.run({rand_t({7}, rng)}, [](Graph<double>& g, const std::vector<Id>& in) {
      return g.sum_all(g.gelu(in[0]));
    });
    gc.run({rand_t({2, 3, 4}, rng), rand_t({4, 5}, rng)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             return g.sum_all(g.matmul(in[0], in[1]));
           });
    gc.run({rand_t({2, 2, 3}, rng), rand_t({2, 3, 2}, rng)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             return g.sum_all(g.matmul(in[0], in[1]));
           });
    gc.run({rand_t({2, 3, 4}, rng)}, [](Graph<double>& g, const std::vector<Id>& in) {
      const auto p = g.permute(in[0], {2, 0, 1});
      return g.sum_all(g.mul(g.reshape(p, {4, 6}), g.reshape(g.transpose_last(in[0]), {4, 6})));
    });
    gc.run({rand_t({3, 4}, rng), rand_t({2, 4}, rng)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             const auto cat = g.concat_rows(std::array{in[0], in[1]});
             const auto picked = g.gather_rows(cat, {0, 4, 2, 2});  // repeated row accumulates
             return g.sum_all(g.mul(picked, picked));
           });
    gc.run({rand_t({3, 5}, rng)}, [](Graph<double>& g, const std::vector<Id>& in) {
      const auto s = g.softmax_lastdim(in[0]);
      return g.sum_all(g.mul(s, s));
    });
    gc.run({rand_t({4, 6}, rng), rand_t({6}, rng, 0.5), rand_t({6}, rng, 0.5)},
           [](Graph<double>& g, const std::vector<Id>& in) {
             const auto y = g.layer_norm(in[0], g.add_const(in[1], 1.0), in[2]);
             return g.sum_all(g.mul(y, y));
           });
    gc.run({rand_t({3, 4}, rng)}, [](Graph<double>& g, const std::vector<Id>& in) {
      return g.mean_all(g.mul(g.sum_lastdim(in[0]), g.sum_lastdim(in[0])));
    });
    gc.run({rand_t({3, 4}, rng)}, [](Graph<double>& g, const std::vector<Id>& in) {
      const auto n = ad::l2_normalize_lastdim(g, in[0], 1e-8);
      return g.sum_all(g.mul(n, g.exp_(g.scale(n, 0.5))));
    });
  }
  MESSAGE("max relative error across op checks: ", gc.max_rel_error);
}

TEST_CASE("shared subexpression accumulates like a duplicated subgraph") {
  Rng rng(17);
  const auto x = rand_t({3, 3}, rng);
  const auto w = rand_t({3, 3}, rng);

  Graph<double> g1;
  const Id xi1 = g1.input(x, true);
  const Id wi1 = g1.input(w, false);
  const Id y1 = g1.matmul(xi1, wi1);
  const Id out1 = g1.sum_all(g1.add(g1.mul(y1, y1), y1));
  g1.backward(out1);

  Graph<double> g2;
  const Id xi2 = g2.input(x, true);
  const Id wi2 = g2.input(w, false);
  const Id ya = g2.matmul(xi2, wi2);
  const Id yb = g2.matmul(xi2, wi2);
  const Id out2 = g2.sum_all(g2.add(g2.mul(ya, yb), ya));
  g2.backward(out2);

  for (size_t i = 0; i < x.v.size(); ++i)
    CHECK(g1.grad(xi1).v[i] == doctest::Approx(g2.grad(xi2).v[i]).epsilon(1e-12));
}

TEST_CASE("shape mismatches raise with both shapes in the message") {
  Graph<float> g;
  const Id a = g.input(Tensor<float>::zeros({2, 3}), false);
  const Id b = g.input(Tensor<float>::zeros({4, 5}), false);
  CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
  CHECK_THROWS_AS(g.add(a, b), std::invalid_argument);
}

TEST_CASE("adamw: zero gradient, hand-computed step, decoupled decay") {
  {
    ad::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.0});
    Tensor<float> p = Tensor<float>::full({3}, 2.0f);
    Tensor<float> gr = Tensor<float>::zeros({3});
    std::vector<Tensor<float>*> ps = {&p};
    CHECK(opt.step(ps, {&gr}));
    for (float v : p.v) CHECK(v == 2.0f);
  }
  {
    ad::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.0});
    Tensor<float> p = Tensor<float>::full({1}, 1.0f);
    Tensor<float> gr = Tensor<float>::full({1}, 1.0f);
    std::vector<Tensor<float>*> ps = {&p};
    REQUIRE(opt.step(ps, {&gr}));
    const double m_hat = (0.1 * 1.0) / (1.0 - 0.9);    // = 1
    const double v_hat = (0.05 * 1.0) / (1.0 - 0.95);  // = 1
    const double expected = 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(p.v[0] == doctest::Approx(expected).epsilon(1e-7));
  }
  {
    ad::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.05});
    Tensor<float> p = Tensor<float>::full({2}, 4.0f);
    Tensor<float> gr = Tensor<float>::zeros({2});
    std::vector<Tensor<float>*> ps = {&p};
    REQUIRE(opt.step(ps, {&gr}));
    for (float v : p.v) CHECK(v == doctest::Approx(4.0f * (1.0 - 0.1 * 0.05)).epsilon(1e-7));
  }
  {
    ad::AdamW opt({0.1, 0.9, 0.95, 1e-8, 0.0});
    Tensor<float> p = Tensor<float>::full({1}, 1.0f);
    Tensor<float> gr = Tensor<float>::full({1}, std::numeric_limits<float>::quiet_NaN());
    std::vector<Tensor<float>*> ps = {&p};
    CHECK(!opt.step(ps, {&gr}));
    CHECK(p.v[0] == 1.0f);
    CHECK(opt.step_count() == 0);
  }
}

TEST_CASE("cosine warmup schedule") {
  CHECK(ad::cosine_warmup_lr(0.0, 5, 200, 8e-4) == 0.0);
  CHECK(ad::cosine_warmup_lr(5.0, 5, 200, 8e-4) == doctest::Approx(8e-4).epsilon(1e-12));
  CHECK(ad::cosine_warmup_lr(102.5, 5, 200, 8e-4) == doctest::Approx(4e-4).epsilon(1e-9));
  CHECK(ad::cosine_warmup_lr(200.0, 5, 200, 8e-4) == 0.0);
  CHECK(ad::cosine_warmup_lr(2.5, 5, 200, 8e-4) == doctest::Approx(4e-4).epsilon(1e-12));
}

TEST_CASE("gradient clipping") {
  {
    Tensor<float> g({2}, {0.006f, 0.008f});  // norm 0.01
    std::vector<Tensor<float>*> gs = {&g};
    ad::clip_gradients(gs, 0.02);
    CHECK(g.v[0] == 0.006f);
    CHECK(g.v[1] == 0.008f);
  }
  {
    Tensor<float> g({2}, {0.024f, 0.032f});  // norm 0.04
    std::vector<Tensor<float>*> gs = {&g};
    ad::clip_gradients(gs, 0.02);
    CHECK(g.v[0] == doctest::Approx(0.012f));
    CHECK(g.v[1] == doctest::Approx(0.016f));
    CHECK(std::hypot(g.v[0], g.v[1]) == doctest::Approx(0.02).epsilon(1e-6));
  }
  {
    Tensor<float> g = Tensor<float>::zeros({4});
    std::vector<Tensor<float>*> gs = {&g};
    ad::clip_gradients(gs, 0.02);
    for (float v : g.v) CHECK(v == 0.f);
  }
  {
    Tensor<float> g({3}, {0.5f, -0.7f, 0.1f});
    std::vector<Tensor<float>*> gs = {&g};
    ad::clip_gradients(gs, 0.3, ad::ClipMode::PerValue);
    CHECK(g.v[0] == 0.3f);
    CHECK(g.v[1] == -0.3f);
    CHECK(g.v[2] == 0.1f);
  }
}

TEST_CASE("checkpoint round trip with optimizer state") {
  Rng rng(23);
  ad::Checkpoint ckpt;
  ckpt.meta_json = R"({"stage":"test"})";
  for (int i = 0; i < 3; ++i) {
    ad::Param p;
    p.name = "param" + std::to_string(i);
    p.value = Tensor<float>::randn({2, 3 + i}, rng);
    p.m = Tensor<float>::randn({2, 3 + i}, rng);
    p.v = Tensor<float>::randn({2, 3 + i}, rng);
    ckpt.params.push_back(std::move(p));
  }
  ckpt.has_optimizer_state = true;
  ckpt.optimizer_step = 42;

  const std::string path = "/tmp/saghog_test_ckpt.sgck";
  ad::save_checkpoint(path, ckpt);
  const auto back = ad::load_checkpoint(path);
  CHECK(back.meta_json == ckpt.meta_json);
  CHECK(back.optimizer_step == 42);
  REQUIRE(back.params.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.params[i].name == ckpt.params[i].name);
    CHECK(back.params[i].value.shape == ckpt.params[i].value.shape);
    CHECK(back.params[i].value.v == ckpt.params[i].value.v);
    CHECK(back.params[i].m.v == ckpt.params[i].m.v);
    CHECK(back.params[i].v.v == ckpt.params[i].v.v);
  }
}

TEST_CASE("deterministic trajectories under equal seeds") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    ad::AdamW opt({1e-3, 0.9, 0.95, 1e-8, 0.01});
    Tensor<float> w = Tensor<float>::randn({4, 4}, rng, 0.1);
    for (int step = 0; step < 20; ++step) {
      Graph<float> g;
      const Id wi = g.input(w, true);
      const Id x = g.input(Tensor<float>::randn({4, 4}, rng), false);
      const Id loss = g.mean_all(g.mul(g.matmul(x, wi), g.matmul(x, wi)));
      g.backward(loss);
      std::vector<Tensor<float>*> gs = {&g.ensure_grad(wi)};
      ad::clip_gradients(gs, 1.0);
      std::vector<Tensor<float>*> ps = {&w};
      opt.step(ps, {gs[0]});
    }
    return w.v;
  };
  const auto a = run(5);
  const auto b = run(5);
  CHECK(a == b);  // bit-identical
}
