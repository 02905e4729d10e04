#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "saghog/tensor.hpp"

namespace saghog::ad {

// Row-major matrix kernels, fixed accumulation order (bit-exact for any
// thread count: each output element is produced by one sequential loop).
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a * b^T, b given as [n, k]
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c += a^T * b, a given as [k, m]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = a[static_cast<size_t>(p) * m + i];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Reverse-mode tape over eagerly evaluated dense ops. Node ids are creation
// ordered, so parents always precede children and the backward sweep is a
// single reverse pass. Gradients of shared subexpressions accumulate by sum.
template <class T>
class Graph {
 public:
  using Id = int32_t;

  Id input(Tensor<T> t, bool requires_grad = false) {
    return push(std::move(t), requires_grad, {});
  }

  const Tensor<T>& value(Id id) const { return nodes_[id].value; }
  const Tensor<T>& grad(Id id) const { return nodes_[id].grad; }
  bool needs_grad(Id id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise with broadcast (same shape, trailing suffix, row scalar
  // where b's last extent is 1, or scalar b) ----

  Id add(Id a, Id b) { return binary(a, b, "add", [](T x, T y) { return x + y; },
                                     [](T, T, T g) { return g; }, [](T, T, T g) { return g; }); }
  Id sub(Id a, Id b) { return binary(a, b, "sub", [](T x, T y) { return x - y; },
                                     [](T, T, T g) { return g; }, [](T, T, T g) { return -g; }); }
  Id mul(Id a, Id b) { return binary(a, b, "mul", [](T x, T y) { return x * y; },
                                     [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; }); }
  Id div(Id a, Id b) {
    return binary(a, b, "div", [](T x, T y) { return x / y; },
                  [](T, T y, T g) { return g / y; },
                  [](T x, T y, T g) { return -g * x / (y * y); });
  }

  Id scale(Id a, T c) {
    return unary(a, [c](T x) { return c * x; }, [c](T, T, T g) { return c * g; });
  }
  Id add_const(Id a, T c) {
    return unary(a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
  }
  Id pow_const(Id a, T p) {
    return unary(a, [p](T x) { return std::pow(x, p); },
                 [p](T x, T, T g) { return g * p * std::pow(x, p - T(1)); });
  }
  Id exp_(Id a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
  }
  Id log_(Id a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
  }
  Id gelu(Id a) {
    auto fwd = [](T x) { return T(0.5) * x * (T(1) + std::erf(x / T(M_SQRT2))); };
    auto bwd = [](T x, T, T g) {
      const T cdf = T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
      const T pdf = std::exp(-x * x / T(2)) / T(std::sqrt(2.0 * M_PI));
      return g * (cdf + x * pdf);
    };
    return unary(a, fwd, bwd);
  }

  // ---- structural ----

  Id reshape(Id a, std::vector<int> shape) {
    const auto& av = nodes_[a].value;
    SAGHOG_CHECK_SHAPES(Tensor<T>::numel_of(shape) == av.numel(), "reshape", av.shape_str(), "requested");
    Tensor<T> out(shape, av.v);
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const auto& g = nodes_[id].grad;
      for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    });
    return id;
  }

  Id transpose_last(Id a) {
    const auto& av = nodes_[a].value;
    SAGHOG_CHECK_SHAPES(av.shape.size() >= 2, "transpose_last", av.shape_str(), "rank>=2");
    std::vector<int> perm(av.shape.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
  }

  Id permute(Id a, const std::vector<int>& perm) {
    const auto& av = nodes_[a].value;
    const size_t rank = av.shape.size();
    SAGHOG_CHECK_SHAPES(perm.size() == rank, "permute", av.shape_str(), "perm rank");
    std::vector<int> out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = av.shape[perm[i]];

    Tensor<T> out(out_shape);
    permute_copy(av, perm, out);
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    std::vector<int> inv(rank);
    for (size_t i = 0; i < rank; ++i) inv[perm[i]] = static_cast<int>(i);
    set_backward(id, [this, id, a, inv]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      Tensor<T> tmp(nodes_[a].value.shape);
      permute_copy(nodes_[id].grad, inv, tmp);
      for (size_t i = 0; i < tmp.v.size(); ++i) ga.v[i] += tmp.v[i];
    });
    return id;
  }

  // a viewed as [R, C] by flattening trailing dims; out row i = a row idx[i].
  Id gather_rows(Id a, std::vector<int> idx) {
    const auto& av = nodes_[a].value;
    SAGHOG_CHECK_SHAPES(!av.shape.empty(), "gather_rows", av.shape_str(), "rank>=1");
    const int rows = av.shape[0];
    const size_t cols = av.numel() / static_cast<size_t>(rows);
    for (int i : idx)
      SAGHOG_CHECK_SHAPES(i >= 0 && i < rows, "gather_rows", av.shape_str(), "index out of range");
    std::vector<int> out_shape = av.shape;
    out_shape[0] = static_cast<int>(idx.size());
    Tensor<T> out(out_shape);
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy_n(av.v.begin() + static_cast<size_t>(idx[r]) * cols, cols, out.v.begin() + r * cols);
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a, idx = std::move(idx), cols]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const auto& g = nodes_[id].grad;
      for (size_t r = 0; r < idx.size(); ++r) {
        const T* src = g.v.data() + r * cols;
        T* dst = ga.v.data() + static_cast<size_t>(idx[r]) * cols;
        for (size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    });
    return id;
  }

  Id concat_rows(std::span<const Id> parts) {
    SAGHOG_CHECK_SHAPES(!parts.empty(), "concat_rows", "[]", "non-empty");
    const auto& first = nodes_[parts[0]].value;
    std::vector<int> out_shape = first.shape;
    const size_t cols = first.numel() / static_cast<size_t>(first.shape[0]);
    int total_rows = 0;
    bool needs = false;
    for (Id p : parts) {
      const auto& pv = nodes_[p].value;
      SAGHOG_CHECK_SHAPES(pv.shape.size() == first.shape.size(), "concat_rows", pv.shape_str(), first.shape_str());
      for (size_t d = 1; d < first.shape.size(); ++d)
        SAGHOG_CHECK_SHAPES(pv.shape[d] == first.shape[d], "concat_rows", pv.shape_str(), first.shape_str());
      total_rows += pv.shape[0];
      needs = needs || nodes_[p].needs_grad;
    }
    out_shape[0] = total_rows;
    Tensor<T> out(out_shape);
    size_t off = 0;
    for (Id p : parts) {
      const auto& pv = nodes_[p].value;
      std::copy(pv.v.begin(), pv.v.end(), out.v.begin() + off);
      off += pv.numel();
    }
    std::vector<Id> parents(parts.begin(), parts.end());
    const Id id = push(std::move(out), needs, parents);
    set_backward(id, [this, id, parents, cols]() {
      const auto& g = nodes_[id].grad;
      size_t off2 = 0;
      for (Id p : parents) {
        const size_t n = nodes_[p].value.numel();
        if (nodes_[p].needs_grad) {
          auto& gp = ensure_grad(p);
          for (size_t i = 0; i < n; ++i) gp.v[i] += g.v[off2 + i];
        }
        off2 += n;
      }
    });
    (void)cols;
    return id;
  }

  // ---- matrix products ----

  // [..., M, K] x [K, N], or [..., M, K] x [..., K, N] with equal leading dims.
  Id matmul(Id a, Id b) {
    const auto& av = nodes_[a].value;
    const auto& bv = nodes_[b].value;
    SAGHOG_CHECK_SHAPES(av.shape.size() >= 2 && bv.shape.size() >= 2, "matmul", av.shape_str(), bv.shape_str());
    const int m = av.shape[av.shape.size() - 2];
    const int k = av.shape[av.shape.size() - 1];
    const int kb = bv.shape[bv.shape.size() - 2];
    const int n = bv.shape[bv.shape.size() - 1];
    SAGHOG_CHECK_SHAPES(k == kb, "matmul", av.shape_str(), bv.shape_str());
    const bool shared_b = bv.shape.size() == 2 && av.shape.size() > 2;
    if (!shared_b && av.shape.size() != bv.shape.size())
      SAGHOG_CHECK_SHAPES(false, "matmul", av.shape_str(), bv.shape_str());
    size_t batch = 1;
    for (size_t d = 0; d + 2 < av.shape.size(); ++d) {
      batch *= static_cast<size_t>(av.shape[d]);
      if (!shared_b) SAGHOG_CHECK_SHAPES(av.shape[d] == bv.shape[d], "matmul", av.shape_str(), bv.shape_str());
    }
    std::vector<int> out_shape(av.shape.begin(), av.shape.end() - 1);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    const size_t a_sz = static_cast<size_t>(m) * k, b_sz = static_cast<size_t>(k) * n,
                 c_sz = static_cast<size_t>(m) * n;
    for (size_t bi = 0; bi < batch; ++bi)
      mm_nn(av.v.data() + bi * a_sz, bv.v.data() + (shared_b ? 0 : bi * b_sz), out.v.data() + bi * c_sz,
            m, k, n);
    const Id id = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {a, b});
    set_backward(id, [this, id, a, b, m, k, n, batch, shared_b, a_sz, b_sz, c_sz]() {
      const auto& g = nodes_[id].grad;
      const auto& av2 = nodes_[a].value;
      const auto& bv2 = nodes_[b].value;
      if (nodes_[a].needs_grad) {
        auto& ga = ensure_grad(a);
        for (size_t bi = 0; bi < batch; ++bi)
          mm_nt(g.v.data() + bi * c_sz, bv2.v.data() + (shared_b ? 0 : bi * b_sz),
                ga.v.data() + bi * a_sz, m, n, k);
      }
      if (nodes_[b].needs_grad) {
        auto& gb = ensure_grad(b);
        for (size_t bi = 0; bi < batch; ++bi)
          mm_tn(av2.v.data() + bi * a_sz, g.v.data() + bi * c_sz,
                gb.v.data() + (shared_b ? 0 : bi * b_sz), k, m, n);
      }
    });
    return id;
  }

  // ---- normalization / activation over the last axis ----

  Id softmax_lastdim(Id a) {
    const auto& av = nodes_[a].value;
    const int d = av.last_dim();
    const size_t rows = av.rows();
    Tensor<T> out(av.shape);
    for (size_t r = 0; r < rows; ++r) {
      const T* x = av.v.data() + r * d;
      T* y = out.v.data() + r * d;
      T mx = x[0];
      for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
      T sum = T(0);
      for (int i = 0; i < d; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
      }
      for (int i = 0; i < d; ++i) y[i] /= sum;
    }
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a, d]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const auto& y = nodes_[id].value;
      const auto& g = nodes_[id].grad;
      const size_t rows = y.rows();
      for (size_t r = 0; r < rows; ++r) {
        const T* yr = y.v.data() + r * d;
        const T* gr = g.v.data() + r * d;
        T dot = T(0);
        for (int i = 0; i < d; ++i) dot += yr[i] * gr[i];
        T* gar = ga.v.data() + r * d;
        for (int i = 0; i < d; ++i) gar[i] += yr[i] * (gr[i] - dot);
      }
    });
    return id;
  }

  // Per-row normalization over the last axis with learnable scale and shift.
  Id layer_norm(Id a, Id gamma, Id beta, T eps = T(1e-6)) {
    const auto& av = nodes_[a].value;
    const int d = av.last_dim();
    SAGHOG_CHECK_SHAPES(nodes_[gamma].value.shape == std::vector<int>{d}, "layer_norm",
                 nodes_[gamma].value.shape_str(), av.shape_str());
    SAGHOG_CHECK_SHAPES(nodes_[beta].value.shape == std::vector<int>{d}, "layer_norm",
                 nodes_[beta].value.shape_str(), av.shape_str());
    const size_t rows = av.rows();
    Tensor<T> out(av.shape);
    Tensor<T> xhat(av.shape);
    std::vector<T> inv_std(rows);
    const T* gm = nodes_[gamma].value.v.data();
    const T* bt = nodes_[beta].value.v.data();
    for (size_t r = 0; r < rows; ++r) {
      const T* x = av.v.data() + r * d;
      T mu = T(0);
      for (int i = 0; i < d; ++i) mu += x[i];
      mu /= T(d);
      T var = T(0);
      for (int i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
      var /= T(d);
      const T istd = T(1) / std::sqrt(var + eps);
      inv_std[r] = istd;
      T* xh = xhat.v.data() + r * d;
      T* y = out.v.data() + r * d;
      for (int i = 0; i < d; ++i) {
        xh[i] = (x[i] - mu) * istd;
        y[i] = gm[i] * xh[i] + bt[i];
      }
    }
    const Id id = push(std::move(out), nodes_[a].needs_grad || nodes_[gamma].needs_grad ||
                                           nodes_[beta].needs_grad,
                       {a, gamma, beta});
    set_backward(id, [this, id, a, gamma, beta, d, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)]() {
      const auto& g = nodes_[id].grad;
      const size_t rows = xhat.rows();
      const T* gm = nodes_[gamma].value.v.data();
      if (nodes_[gamma].needs_grad || nodes_[beta].needs_grad) {
        auto& gg = ensure_grad(gamma);
        auto& gb = ensure_grad(beta);
        for (size_t r = 0; r < rows; ++r) {
          const T* gr = g.v.data() + r * d;
          const T* xh = xhat.v.data() + r * d;
          for (int i = 0; i < d; ++i) {
            gg.v[i] += gr[i] * xh[i];
            gb.v[i] += gr[i];
          }
        }
      }
      if (nodes_[a].needs_grad) {
        auto& ga = ensure_grad(a);
        for (size_t r = 0; r < rows; ++r) {
          const T* gr = g.v.data() + r * d;
          const T* xh = xhat.v.data() + r * d;
          T sum_g = T(0), sum_gx = T(0);
          for (int i = 0; i < d; ++i) {
            const T dxh = gr[i] * gm[i];
            sum_g += dxh;
            sum_gx += dxh * xh[i];
          }
          T* gar = ga.v.data() + r * d;
          for (int i = 0; i < d; ++i) {
            const T dxh = gr[i] * gm[i];
            gar[i] += inv_std[r] / T(d) * (T(d) * dxh - sum_g - xh[i] * sum_gx);
          }
        }
      }
    });
    return id;
  }

  // ---- reductions ----

  Id sum_all(Id a) {
    const auto& av = nodes_[a].value;
    T s = T(0);
    for (T x : av.v) s += x;
    const Id id = push(Tensor<T>::scalar(s), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const T g = nodes_[id].grad.v[0];
      for (auto& x : ga.v) x += g;
    });
    return id;
  }

  Id mean_all(Id a) {
    const T inv = T(1) / T(nodes_[a].value.numel());
    return scale(sum_all(a), inv);
  }

  // keepdim reduction: [..., D] -> [..., 1]
  Id sum_lastdim(Id a) {
    const auto& av = nodes_[a].value;
    const int d = av.last_dim();
    const size_t rows = av.rows();
    std::vector<int> out_shape = av.shape;
    out_shape.back() = 1;
    Tensor<T> out(out_shape);
    for (size_t r = 0; r < rows; ++r) {
      T s = T(0);
      const T* x = av.v.data() + r * d;
      for (int i = 0; i < d; ++i) s += x[i];
      out.v[r] = s;
    }
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a, d]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const auto& g = nodes_[id].grad;
      for (size_t r = 0; r < g.v.size(); ++r) {
        T* gar = ga.v.data() + r * d;
        for (int i = 0; i < d; ++i) gar[i] += g.v[r];
      }
    });
    return id;
  }

  // ---- backward driver ----

  void backward(Id root) {
    auto& rn = nodes_[root];
    SAGHOG_CHECK_SHAPES(rn.value.numel() == 1, "backward", rn.value.shape_str(), "[1]");
    ensure_grad(root).v[0] = T(1);
    for (Id id = root; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.needs_grad || n.grad.v.empty() || !n.backward_fn) continue;
      n.backward_fn();
    }
  }

  Tensor<T>& ensure_grad(Id id) {
    auto& n = nodes_[id];
    if (n.grad.v.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void()> backward_fn;
  };

  std::vector<Node> nodes_;

  Id push(Tensor<T> value, bool needs, const std::vector<Id>& parents) {
    (void)parents;
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  void set_backward(Id id, std::function<void()> fn) {
    if (nodes_[id].needs_grad) nodes_[id].backward_fn = std::move(fn);
  }

  enum class Bc { Same, Suffix, RowScalar, Scalar };

  static Bc broadcast_kind(const std::vector<int>& a, const std::vector<int>& b) {
    if (a == b) return Bc::Same;
    if (b.size() == 1 && b[0] == 1) return Bc::Scalar;
    if (b.size() == a.size()) {
      bool row_scalar = b.back() == 1;
      for (size_t i = 0; i + 1 < a.size() && row_scalar; ++i) row_scalar = a[i] == b[i];
      if (row_scalar && !a.empty()) return Bc::RowScalar;
    }
    if (b.size() < a.size()) {
      bool suffix = true;
      for (size_t i = 0; i < b.size() && suffix; ++i)
        suffix = b[b.size() - 1 - i] == a[a.size() - 1 - i];
      if (suffix) return Bc::Suffix;
    }
    SAGHOG_CHECK_SHAPES(false, "broadcast", shape_str(a), shape_str(b));
    return Bc::Same;
  }

  static std::string shape_str(const std::vector<int>& s) {
    Tensor<T> t;
    t.shape = s;
    return t.shape_str();
  }

  // index of b's element aligned with a's flat index i
  static size_t bcast_index(Bc kind, size_t i, size_t b_numel, int last_dim) {
    switch (kind) {
      case Bc::Same: return i;
      case Bc::Scalar: return 0;
      case Bc::Suffix: return i % b_numel;
      case Bc::RowScalar: return i / static_cast<size_t>(last_dim);
    }
    return 0;
  }

  template <class FwdFn, class BwdA, class BwdB>
  Id binary(Id a, Id b, const char* name, FwdFn fwd, BwdA bwd_a, BwdB bwd_b) {
    (void)name;
    const auto& av = nodes_[a].value;
    const auto& bv = nodes_[b].value;
    const Bc kind = broadcast_kind(av.shape, bv.shape);
    const int last = av.last_dim();
    Tensor<T> out(av.shape);
    const size_t bn = bv.numel();
    for (size_t i = 0; i < out.v.size(); ++i)
      out.v[i] = fwd(av.v[i], bv.v[bcast_index(kind, i, bn, last)]);
    const Id id = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {a, b});
    set_backward(id, [this, id, a, b, kind, bn, last, bwd_a, bwd_b]() {
      const auto& g = nodes_[id].grad;
      const auto& av2 = nodes_[a].value;
      const auto& bv2 = nodes_[b].value;
      if (nodes_[a].needs_grad) {
        auto& ga = ensure_grad(a);
        for (size_t i = 0; i < g.v.size(); ++i) {
          const size_t bi = bcast_index(kind, i, bn, last);
          ga.v[i] += bwd_a(av2.v[i], bv2.v[bi], g.v[i]);
        }
      }
      if (nodes_[b].needs_grad) {
        auto& gb = ensure_grad(b);
        for (size_t i = 0; i < g.v.size(); ++i) {
          const size_t bi = bcast_index(kind, i, bn, last);
          gb.v[bi] += bwd_b(av2.v[i], bv2.v[bi], g.v[i]);
        }
      }
    });
    return id;
  }

  template <class FwdFn, class BwdFn>
  Id unary(Id a, FwdFn fwd, BwdFn bwd) {
    const auto& av = nodes_[a].value;
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = fwd(av.v[i]);
    const Id id = push(std::move(out), nodes_[a].needs_grad, {a});
    set_backward(id, [this, id, a, bwd]() {
      if (!nodes_[a].needs_grad) return;
      auto& ga = ensure_grad(a);
      const auto& g = nodes_[id].grad;
      const auto& av2 = nodes_[a].value;
      const auto& yv = nodes_[id].value;
      for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += bwd(av2.v[i], yv.v[i], g.v[i]);
    });
    return id;
  }

  static void permute_copy(const Tensor<T>& src, const std::vector<int>& perm, Tensor<T>& dst) {
    const size_t rank = src.shape.size();
    std::vector<size_t> src_strides(rank, 1), dst_shape(rank);
    for (size_t i = rank - 1; i > 0; --i)
      src_strides[i - 1] = src_strides[i] * static_cast<size_t>(src.shape[i]);
    for (size_t i = 0; i < rank; ++i) dst_shape[i] = static_cast<size_t>(src.shape[perm[i]]);

    std::vector<size_t> idx(rank, 0);
    for (size_t o = 0; o < dst.v.size(); ++o) {
      size_t src_off = 0;
      for (size_t d = 0; d < rank; ++d) src_off += idx[d] * src_strides[perm[d]];
      dst.v[o] = src.v[src_off];
      for (size_t d = rank; d-- > 0;) {
        if (++idx[d] < dst_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
};

// Unit-normalizes the last axis: x / sqrt(sum(x^2) + eps).
template <class T>
typename Graph<T>::Id l2_normalize_lastdim(Graph<T>& g, typename Graph<T>::Id a, T eps = T(1e-12)) {
  const auto sq = g.mul(a, a);
  const auto ss = g.sum_lastdim(sq);
  const auto inv = g.pow_const(g.add_const(ss, eps), T(-0.5));
  return g.mul(a, inv);
}

// Mean squared error against a constant target.
template <class T>
typename Graph<T>::Id mse_loss(Graph<T>& g, typename Graph<T>::Id pred, typename Graph<T>::Id target) {
  const auto d = g.sub(pred, target);
  return g.mean_all(g.mul(d, d));
}

}  // namespace saghog::ad
