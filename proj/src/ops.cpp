#include "ean/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ean {

namespace {

thread_local std::uint64_t g_mac_count = 0;
thread_local bool g_mac_enabled = false;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  check(a.dtype() == b.dtype(), std::string(op) + ": mixed element kinds (" +
                                    dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) +
                                    "); element kind must be uniform across a graph");
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  check(a >= 0 && a < rank, std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  return a;
}

// Strides of `s` aligned to a broadcast result of rank `out_rank`; 0 where the
// dimension is broadcast.
std::vector<std::int64_t> bcast_strides(const Shape& s, const Shape& out) {
  auto st = strides_for(s);
  std::vector<std::int64_t> r(out.size(), 0);
  int off = static_cast<int>(out.size() - s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != 1) r[static_cast<std::size_t>(off) + i] = st[i];
  }
  return r;
}

// Sum `t` down to `target` (inverse of broadcasting), preserving dtype.
Tensor reduce_to(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  int lead = t.rank() - static_cast<int>(target.size());
  std::vector<int> axes;
  for (int i = 0; i < t.rank(); ++i) {
    if (i < lead)
      axes.push_back(i);
    else if (target[static_cast<std::size_t>(i - lead)] == 1 && t.dim(i) != 1)
      axes.push_back(i);
  }
  Tensor s = sum(t, axes, /*keepdims=*/true);
  return reshape(s, target);
}

template <typename T, typename F>
void binary_kernel(const Shape& oshape, const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const auto& av = a.vec<T>();
  const auto& bv = b.vec<T>();
  auto& ov = out.mutable_vec<T>();
  const std::int64_t n = numel(oshape);
  if (a.shape() == oshape && b.shape() == oshape) {
    for (std::int64_t i = 0; i < n; ++i)
      ov[static_cast<std::size_t>(i)] =
          f(av[static_cast<std::size_t>(i)], bv[static_cast<std::size_t>(i)]);
    return;
  }
  const int rank = static_cast<int>(oshape.size());
  auto sa = bcast_strides(a.shape(), oshape);
  auto sb = bcast_strides(b.shape(), oshape);
  std::vector<std::int64_t> cnt(oshape.size(), 0);
  std::int64_t offa = 0, offb = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    ov[static_cast<std::size_t>(i)] =
        f(av[static_cast<std::size_t>(offa)], bv[static_cast<std::size_t>(offb)]);
    for (int ax = rank - 1; ax >= 0; --ax) {
      auto u = static_cast<std::size_t>(ax);
      if (++cnt[u] < oshape[u]) {
        offa += sa[u];
        offb += sb[u];
        break;
      }
      cnt[u] = 0;
      offa -= sa[u] * (oshape[u] - 1);
      offb -= sb[u] * (oshape[u] - 1);
    }
  }
}

template <typename FwdT>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdT f,
                 BackwardFn (*make_bwd)(const Tensor&, const Tensor&, const Tensor&)) {
  require_same_dtype(a, b, name);
  Shape oshape = broadcast_shapes(a.shape(), b.shape());
  Tensor out = make_leaf(oshape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    binary_kernel<T>(oshape, a, b, out, [&](T x, T y) { return static_cast<T>(f(x, y)); });
  });
  autograd_record(out, {a, b}, make_bwd(a, b, out));
  return out;
}

template <typename T, typename F>
void unary_kernel(const Tensor& a, Tensor& out, F f) {
  const auto& av = a.vec<T>();
  auto& ov = out.mutable_vec<T>();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("cannot broadcast shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    out[out.size() - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      +[](const Tensor& a_, const Tensor& b_, const Tensor&) -> BackwardFn {
        return [a_, b_](const Tensor& g) {
          accumulate_grad(a_, reduce_to(g, a_.shape()));
          accumulate_grad(b_, reduce_to(g, b_.shape()));
        };
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      +[](const Tensor& a_, const Tensor& b_, const Tensor&) -> BackwardFn {
        return [a_, b_](const Tensor& g) {
          accumulate_grad(a_, reduce_to(g, a_.shape()));
          accumulate_grad(b_, reduce_to(neg(g), b_.shape()));
        };
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      +[](const Tensor& a_, const Tensor& b_, const Tensor&) -> BackwardFn {
        return [a_, b_](const Tensor& g) {
          accumulate_grad(a_, reduce_to(mul(g, b_.detach()), a_.shape()));
          accumulate_grad(b_, reduce_to(mul(g, a_.detach()), b_.shape()));
        };
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      +[](const Tensor& a_, const Tensor& b_, const Tensor& out_) -> BackwardFn {
        // Capture a detached view: storing the live output in its own backward
        // closure would create a shared_ptr cycle and leak the whole graph.
        return [a_, b_, y = out_.detach()](const Tensor& g) {
          Tensor gb = reduce_to(neg(mul(div(g, b_.detach()), y)), b_.shape());
          accumulate_grad(a_, reduce_to(div(g, b_.detach()), a_.shape()));
          accumulate_grad(b_, gb);
        };
      });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [s](T x) { return static_cast<T>(x + static_cast<T>(s)); });
  });
  autograd_record(out, {a}, [a](const Tensor& g) { accumulate_grad(a, g); });
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [s](T x) { return static_cast<T>(x * static_cast<T>(s)); });
  });
  autograd_record(out, {a}, [a, s](const Tensor& g) { accumulate_grad(a, mul_scalar(g, s)); });
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [](T x) { return x > T(0) ? x : T(0); });
  });
  autograd_record(out, {a}, [a](const Tensor& g) {
    Tensor ga = make_leaf(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<typename T>(Type<T>) {
      const auto& av = a.vec<T>();
      const auto& gv = g.vec<T>();
      auto& ov = ga.mutable_vec<T>();
      for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] > T(0) ? gv[i] : T(0);
    });
    accumulate_grad(a, ga);
  });
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [](T x) { return std::exp(x); });
  });
  autograd_record(out, {a},
                  [a, y = out.detach()](const Tensor& g) { accumulate_grad(a, mul(g, y)); });
  return out;
}

Tensor log(const Tensor& a) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [](T x) { return std::log(x); });
  });
  autograd_record(out, {a},
                  [a](const Tensor& g) { accumulate_grad(a, div(g, a.detach())); });
  return out;
}

Tensor sqrt(const Tensor& a) {
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    unary_kernel<T>(a, out, [](T x) { return std::sqrt(x); });
  });
  autograd_record(out, {a}, [a, y = out.detach()](const Tensor& g) {
    accumulate_grad(a, div(mul_scalar(g, 0.5), y));
  });
  return out;
}

// ---- matmul -----------------------------------------------------------------

namespace {

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> perm(static_cast<std::size_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  check(a.rank() >= 2 && b.rank() >= 2,
        "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  const std::int64_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::int64_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  check(K == K2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = broadcast_shapes(abatch, bbatch);
  Shape oshape = obatch;
  oshape.push_back(M);
  oshape.push_back(N);

  Tensor out = make_leaf(oshape, a.dtype());
  const std::int64_t nbatch = numel(obatch);
  auto sa = bcast_strides(abatch, obatch);
  auto sb = bcast_strides(bbatch, obatch);
  // Per-batch offsets in units of one matrix.
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const T* abase = a.vec<T>().data();
    const T* bbase = b.vec<T>().data();
    T* obase = out.mutable_vec<T>().data();
    std::vector<std::int64_t> cnt(obatch.size(), 0);
    std::int64_t offa = 0, offb = 0;
    const int brank = static_cast<int>(obatch.size());
    for (std::int64_t batch = 0; batch < nbatch; ++batch) {
      const T* A = abase + offa * M * K;
      const T* B = bbase + offb * K * N;
      T* C = obase + batch * M * N;
      for (std::int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        std::memset(crow, 0, static_cast<std::size_t>(N) * sizeof(T));
        const T* arow = A + m * K;
        for (std::int64_t k = 0; k < K; ++k) {
          const T av = arow[k];
          const T* brow = B + k * N;
          for (std::int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
      }
      for (int ax = brank - 1; ax >= 0; --ax) {
        auto u = static_cast<std::size_t>(ax);
        if (++cnt[u] < obatch[u]) {
          offa += sa[u];
          offb += sb[u];
          break;
        }
        cnt[u] = 0;
        offa -= sa[u] * (obatch[u] - 1);
        offb -= sb[u] * (obatch[u] - 1);
      }
    }
  });
  if (g_mac_enabled)
    g_mac_count += static_cast<std::uint64_t>(nbatch) * static_cast<std::uint64_t>(M) *
                   static_cast<std::uint64_t>(K) * static_cast<std::uint64_t>(N);

  autograd_record(out, {a, b}, [a, b](const Tensor& g) {
    Tensor ga = matmul(g, transpose_last2(b.detach()));
    Tensor gb = matmul(transpose_last2(a.detach()), g);
    accumulate_grad(a, reduce_to(ga, a.shape()));
    accumulate_grad(b, reduce_to(gb, b.shape()));
  });
  return out;
}

// ---- softmax ----------------------------------------------------------------

namespace {

template <typename T>
void softmax_kernel(const Tensor& a, Tensor& out, int axis, bool log_form) {
  const Shape& s = a.shape();
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = s[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    inner *= s[static_cast<std::size_t>(i)];
  const auto& av = a.vec<T>();
  auto& ov = out.mutable_vec<T>();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T mx = av[static_cast<std::size_t>(base)];
      for (std::int64_t k = 1; k < n; ++k)
        mx = std::max(mx, av[static_cast<std::size_t>(base + k * inner)]);
      T denom = T(0);
      for (std::int64_t k = 0; k < n; ++k)
        denom += std::exp(av[static_cast<std::size_t>(base + k * inner)] - mx);
      if (log_form) {
        const T ld = std::log(denom);
        for (std::int64_t k = 0; k < n; ++k) {
          auto idx = static_cast<std::size_t>(base + k * inner);
          ov[idx] = av[idx] - mx - ld;
        }
      } else {
        for (std::int64_t k = 0; k < n; ++k) {
          auto idx = static_cast<std::size_t>(base + k * inner);
          ov[idx] = std::exp(av[idx] - mx) / denom;
        }
      }
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  int ax = normalize_axis(axis, a.rank(), "softmax");
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) { softmax_kernel<T>(a, out, ax, false); });
  autograd_record(out, {a}, [a, y = out.detach(), ax](const Tensor& g) {
    Tensor dot = sum(mul(g, y), {ax}, /*keepdims=*/true);
    accumulate_grad(a, mul(y, sub(g, dot)));
  });
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  int ax = normalize_axis(axis, a.rank(), "log_softmax");
  Tensor out = make_leaf(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) { softmax_kernel<T>(a, out, ax, true); });
  autograd_record(out, {a}, [a, y = out.detach(), ax](const Tensor& g) {
    Tensor sg = sum(g, {ax}, /*keepdims=*/true);
    accumulate_grad(a, sub(g, mul(exp(y), sg)));
  });
  return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  std::vector<int> ax;
  ax.reserve(axes.size());
  for (int x : axes) ax.push_back(normalize_axis(x, a.rank(), "sum"));
  std::sort(ax.begin(), ax.end());
  ax.erase(std::unique(ax.begin(), ax.end()), ax.end());

  Shape kshape = a.shape();
  for (int x : ax) kshape[static_cast<std::size_t>(x)] = 1;
  Tensor out = make_leaf(kshape, a.dtype());

  const Shape& ishape = a.shape();
  auto ostr = bcast_strides(kshape, ishape);  // 0 stride along reduced axes
  const std::int64_t n = a.numel();
  const int rank = a.rank();
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const auto& av = a.vec<T>();
    auto& ov = out.mutable_vec<T>();
    std::vector<std::int64_t> cnt(ishape.size(), 0);
    std::int64_t offo = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      ov[static_cast<std::size_t>(offo)] += av[static_cast<std::size_t>(i)];
      for (int d = rank - 1; d >= 0; --d) {
        auto u = static_cast<std::size_t>(d);
        if (++cnt[u] < ishape[u]) {
          offo += ostr[u];
          break;
        }
        cnt[u] = 0;
        offo -= ostr[u] * (ishape[u] - 1);
      }
    }
  });

  Shape fshape;
  if (keepdims) {
    fshape = kshape;
  } else {
    for (int i = 0; i < rank; ++i)
      if (!std::binary_search(ax.begin(), ax.end(), i))
        fshape.push_back(a.shape()[static_cast<std::size_t>(i)]);
  }
  Tensor shaped = out;
  shaped.impl()->shape = fshape;
  autograd_record(shaped, {a}, [a, kshape](const Tensor& g) {
    Tensor gk = reshape(g, kshape);
    accumulate_grad(a, broadcast_to(gk, a.shape()));
  });
  return shaped;
}

Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  std::int64_t cnt = 1;
  for (int x : axes) cnt *= a.dim(normalize_axis(x, a.rank(), "mean"));
  return mul_scalar(sum(a, axes, keepdims), 1.0 / static_cast<double>(cnt));
}

Tensor sum_all(const Tensor& a) {
  std::vector<int> axes(static_cast<std::size_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  return sum(a, axes, false);
}

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& s) {
  check(numel(s) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) + " as " +
                                   shape_str(s) + " (element counts differ)");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data = a.impl()->data;  // shared; tensors are immutable once in a graph
  impl->id = next_tensor_id();
  Tensor out(impl);
  autograd_record(out, {a}, [a](const Tensor& g) { accumulate_grad(a, reshape(g, a.shape())); });
  return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  check(static_cast<int>(perm.size()) == a.rank(),
        "permute: got " + std::to_string(perm.size()) + " axes for rank " +
            std::to_string(a.rank()));
  std::vector<bool> used(perm.size(), false);
  Shape oshape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    int p = normalize_axis(perm[i], a.rank(), "permute");
    check(!used[static_cast<std::size_t>(p)], "permute: duplicate axis in permutation");
    used[static_cast<std::size_t>(p)] = true;
    oshape[i] = a.dim(p);
  }
  Tensor out = make_leaf(oshape, a.dtype());
  auto istr = strides_for(a.shape());
  std::vector<std::int64_t> ostr_src(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    ostr_src[i] = istr[static_cast<std::size_t>(perm[i])];
  const std::int64_t n = a.numel();
  const int rank = a.rank();
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const auto& av = a.vec<T>();
    auto& ov = out.mutable_vec<T>();
    std::vector<std::int64_t> cnt(oshape.size(), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      ov[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(src)];
      for (int d = rank - 1; d >= 0; --d) {
        auto u = static_cast<std::size_t>(d);
        if (++cnt[u] < oshape[u]) {
          src += ostr_src[u];
          break;
        }
        cnt[u] = 0;
        src -= ostr_src[u] * (oshape[u] - 1);
      }
    }
  });
  autograd_record(out, {a}, [a, perm](const Tensor& g) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
      inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    accumulate_grad(a, permute(g, inv));
  });
  return out;
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  int ax = normalize_axis(axis, a.rank(), "slice");
  check(start >= 0 && len >= 1 && start + len <= a.dim(ax),
        "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
            ") out of bounds for axis " + std::to_string(ax) + " of " +
            shape_str(a.shape()));
  Shape oshape = a.shape();
  oshape[static_cast<std::size_t>(ax)] = len;
  Tensor out = make_leaf(oshape, a.dtype());
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t in_ax = a.dim(ax);
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const T* av = a.vec<T>().data();
    T* ov = out.mutable_vec<T>().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(ov + o * len * inner, av + (o * in_ax + start) * inner,
                  static_cast<std::size_t>(len * inner) * sizeof(T));
  });
  autograd_record(out, {a}, [a, ax, start, len, outer, inner, in_ax](const Tensor& g) {
    Tensor ga = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<typename T>(Type<T>) {
      const T* gv = g.vec<T>().data();
      T* av = ga.mutable_vec<T>().data();
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(av + (o * in_ax + start) * inner, gv + o * len * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(T));
    });
    accumulate_grad(a, ga);
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no tensors given");
  int ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape oshape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check(p.rank() == parts[0].rank(), "concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      check(i == ax || p.dim(i) == parts[0].dim(i),
            "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                shape_str(parts[0].shape()));
    total += p.dim(ax);
  }
  oshape[static_cast<std::size_t>(ax)] = total;
  Tensor out = make_leaf(oshape, parts[0].dtype());
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= oshape[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < static_cast<int>(oshape.size()); ++i)
    inner *= oshape[static_cast<std::size_t>(i)];
  dispatch(parts[0].dtype(), [&]<typename T>(Type<T>) {
    T* ov = out.mutable_vec<T>().data();
    std::int64_t pos = 0;
    for (const auto& p : parts) {
      const T* pv = p.vec<T>().data();
      const std::int64_t plen = p.dim(ax) * inner;
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(ov + (o * total) * inner + pos * inner, pv + o * plen,
                    static_cast<std::size_t>(plen) * sizeof(T));
      pos += p.dim(ax);
    }
  });
  autograd_record(out, parts, [parts, ax](const Tensor& g) {
    std::int64_t pos = 0;
    for (const auto& p : parts) {
      accumulate_grad(p, slice(g, ax, pos, p.shape()[static_cast<std::size_t>(ax)]));
      pos += p.shape()[static_cast<std::size_t>(ax)];
    }
  });
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& s) {
  Shape bs = broadcast_shapes(a.shape(), s);
  check(bs == s, "broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " +
                     shape_str(s));
  if (a.shape() == s) return a;
  Tensor out = make_leaf(s, a.dtype());
  auto sa = bcast_strides(a.shape(), s);
  const std::int64_t n = numel(s);
  const int rank = static_cast<int>(s.size());
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const auto& av = a.vec<T>();
    auto& ov = out.mutable_vec<T>();
    std::vector<std::int64_t> cnt(s.size(), 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      ov[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(off)];
      for (int d = rank - 1; d >= 0; --d) {
        auto u = static_cast<std::size_t>(d);
        if (++cnt[u] < s[u]) {
          off += sa[u];
          break;
        }
        cnt[u] = 0;
        off -= sa[u] * (s[u] - 1);
      }
    }
  });
  autograd_record(out, {a}, [a](const Tensor& g) { accumulate_grad(a, reduce_to(g, a.shape())); });
  return out;
}

Tensor flip(const Tensor& a, int axis) {
  int ax = normalize_axis(axis, a.rank(), "flip");
  Tensor out = make_leaf(a.shape(), a.dtype());
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n_ax = a.dim(ax);
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  dispatch(a.dtype(), [&]<typename T>(Type<T>) {
    const T* av = a.vec<T>().data();
    T* ov = out.mutable_vec<T>().data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < n_ax; ++k)
        std::memcpy(ov + (o * n_ax + k) * inner, av + (o * n_ax + (n_ax - 1 - k)) * inner,
                    static_cast<std::size_t>(inner) * sizeof(T));
  });
  autograd_record(out, {a}, [a, ax](const Tensor& g) { accumulate_grad(a, flip(g, ax)); });
  return out;
}

// ---- dropout ----------------------------------------------------------------

Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  check(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return a;  // exact identity
  const double keep = 1.0 - p;
  Tensor mask = make_leaf(a.shape(), a.dtype());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i)
    mask.impl()->data->write(i, u(rng) < keep ? 1.0 / keep : 0.0);
  return mul(a, mask);
}

// ---- finite differences -----------------------------------------------------

std::vector<Tensor> finite_diff_grad(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    const std::vector<Tensor>& inputs, double eps) {
  NoGradGuard ng;
  std::vector<Tensor> grads;
  grads.reserve(inputs.size());
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const Tensor& x = inputs[which];
    check(x.dtype() == DType::f64, "finite_diff_grad: inputs must be f64");
    Tensor g = Tensor::zeros(x.shape(), DType::f64);
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      double orig = x.at(i);
      std::vector<Tensor> probe = inputs;
      Tensor xp = x.clone();
      xp.mutable_vec<double>()[static_cast<std::size_t>(i)] = orig + eps;
      probe[which] = xp;
      const double fp = fn(probe).scalar();
      Tensor xm = x.clone();
      xm.mutable_vec<double>()[static_cast<std::size_t>(i)] = orig - eps;
      probe[which] = xm;
      const double fm = fn(probe).scalar();
      g.mutable_vec<double>()[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * eps);
    }
    grads.push_back(g);
  }
  return grads;
}

// ---- MAC counter ------------------------------------------------------------

void MacCounter::reset() { g_mac_count = 0; }
void MacCounter::enable(bool on) { g_mac_enabled = on; }
std::uint64_t MacCounter::value() { return g_mac_count; }

}  // namespace ean
