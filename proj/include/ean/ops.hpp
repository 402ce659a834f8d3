#pragma once

#include <cstdint>

#include "ean/tensor.hpp"

namespace ean {

// ---- broadcasting -----------------------------------------------------------
// NumPy-style trailing-dimension broadcasting. Throws naming both shapes when
// incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// ---- elementwise ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---- matmul -----------------------------------------------------------------
// Batched matrix product over the last two axes; leading axes broadcast.
// Summation over k runs left-to-right for every output element, so results
// are bitwise reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- softmax ----------------------------------------------------------------
// Numerically stable (max subtraction) softmax / log-softmax along `axis`.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// ---- reductions -------------------------------------------------------------
Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& a);

// ---- shape ops --------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& s);        // shares storage
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor broadcast_to(const Tensor& a, const Shape& s);
Tensor flip(const Tensor& a, int axis);

// ---- dropout ----------------------------------------------------------------
// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p).
// Identity when !training. Mask drawn from `rng` in row-major order.
Tensor dropout(const Tensor& a, double p, Rng& rng, bool training);

// ---- finite differences -----------------------------------------------------
// Central-difference gradient of a scalar-valued function at `inputs`.
// Intended for f64 tensors; returns one gradient tensor per input.
std::vector<Tensor> finite_diff_grad(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    const std::vector<Tensor>& inputs, double eps = 1e-4);

// ---- multiply-accumulate counter -------------------------------------------
// Counts MACs performed by matmul (the only primitive that multiplies and
// accumulates); conv, linear and attention all lower to matmul, so enabling
// the counter around a forward pass yields the executed MAC total.
struct MacCounter {
  static void reset();
  static void enable(bool on);
  static std::uint64_t value();
};

}  // namespace ean
