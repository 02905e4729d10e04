#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "saghog/rng.hpp"

namespace saghog::ad {

// Dense row-major tensor. Training runs on float; the double instantiation
// exists for finite-difference verification.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != numel_of(shape)) throw std::invalid_argument("Tensor: data/shape mismatch");
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int e : s) {
      if (e < 1) throw std::invalid_argument("Tensor: non-positive extent");
      n *= static_cast<size_t>(e);
    }
    return n;
  }

  size_t numel() const { return v.size(); }
  int last_dim() const { return shape.empty() ? 1 : shape.back(); }
  size_t rows() const { return shape.empty() ? 1 : numel() / static_cast<size_t>(shape.back()); }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

// Failure path only; callers must not build the message strings eagerly.
[[noreturn]] inline void fail_shapes(const std::string& op, const std::string& a,
                                     const std::string& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + a + " vs " + b);
}

#define SAGHOG_CHECK_SHAPES(ok, op, a_expr, b_expr) \
  do {                                              \
    if (!(ok)) ::saghog::ad::fail_shapes((op), (a_expr), (b_expr)); \
  } while (0)

inline void check_shapes(bool ok, const std::string& op, const std::string& a, const std::string& b) {
  if (!ok) fail_shapes(op, a, b);
}

}  // namespace saghog::ad
