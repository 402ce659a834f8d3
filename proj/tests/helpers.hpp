#pragma once

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <random>

#include "ean/nn.hpp"
#include "ean/ops.hpp"
#include "ean/tensor.hpp"

namespace testutil {

inline double max_abs(const ean::Tensor& t) {
  double m = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t.at(i)));
  return m;
}

// Max elementwise difference normalized by the larger magnitude of the pair.
inline double rel_err(const ean::Tensor& a, const ean::Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double diff = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  return diff / std::max({max_abs(a), max_abs(b), 1e-6});
}

inline bool bitwise_equal(const ean::Tensor& a, const ean::Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.dtype() == ean::DType::f32)
    return std::memcmp(a.vec<float>().data(), b.vec<float>().data(),
                       a.vec<float>().size() * 4) == 0;
  return std::memcmp(a.vec<double>().data(), b.vec<double>().data(),
                     a.vec<double>().size() * 8) == 0;
}

// Independent triple-loop matrix product (no batching) used as the oracle.
inline ean::Tensor matmul_oracle(const ean::Tensor& a, const ean::Tensor& b) {
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  ean::Tensor out = ean::Tensor::zeros({M, N}, a.dtype());
  for (std::int64_t m = 0; m < M; ++m)
    for (std::int64_t n = 0; n < N; ++n) {
      double acc = 0;
      for (std::int64_t k = 0; k < K; ++k) acc += a.at(m * K + k) * b.at(k * N + n);
      out.impl()->data->write(m * N + n, acc);
    }
  return out;
}

inline ean::Tensor random_f64(const ean::Shape& s, ean::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  return ean::Tensor::rand_uniform(s, rng, lo, hi, ean::DType::f64);
}

// Checks autodiff gradients of fn against central finite differences for every
// input marked differentiable.
inline void gradcheck(const std::function<ean::Tensor(const std::vector<ean::Tensor>&)>& fn,
                      std::vector<ean::Tensor> inputs, double tol = 1e-3) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  ean::Tensor loss = fn(inputs);
  ean::backward(loss);
  auto fd = ean::finite_diff_grad(fn, inputs, 1e-4);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    REQUIRE(inputs[i].has_grad());
    CHECK(rel_err(inputs[i].grad(), fd[i]) < tol);
  }
}

// Overwrite a tensor's values in place with uniform noise (test fixtures).
inline void randomize(const ean::Tensor& t, ean::Rng& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.impl()->data->write(i, d(rng));
}

// Plain gradient-descent update on every parameter carrying a gradient.
inline void sgd_step(ean::Module& m, double lr) {
  ean::NoGradGuard ng;
  for (auto& p : m.parameters()) {
    if (!p.has_grad()) continue;
    ean::copy_values(p, ean::sub(p.detach(), ean::mul_scalar(p.grad(), lr)));
    p.zero_grad();
  }
}

// Finite-difference check of a whole module: compares autodiff gradients of
// loss_fn() w.r.t. every parameter and every tensor in `extra` against central
// differences obtained by perturbing the underlying storage directly.
// loss_fn must be deterministic and read the current parameter values.
inline void module_gradcheck(ean::Module& m, const std::vector<ean::Tensor>& extra,
                             const std::function<ean::Tensor()>& loss_fn,
                             double eps = 1e-4, double tol = 1e-3) {
  using ean::Tensor;
  std::vector<Tensor> all = extra;
  for (auto& p : m.parameters()) all.push_back(p);
  for (auto& t : all) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  ean::backward(loss);
  for (auto& t : all) {
    REQUIRE(t.has_grad());
    Tensor g = t.grad().clone();
    Tensor fd = Tensor::zeros(t.shape(), t.dtype());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double v = t.impl()->data->read(i);
      double lp, lm;
      {
        ean::NoGradGuard ng;
        t.impl()->data->write(i, v + eps);
        lp = loss_fn().scalar();
        t.impl()->data->write(i, v - eps);
        lm = loss_fn().scalar();
        t.impl()->data->write(i, v);
      }
      fd.impl()->data->write(i, (lp - lm) / (2 * eps));
    }
    CHECK(rel_err(g, fd) < tol);
    t.zero_grad();
  }
}

}  // namespace testutil
