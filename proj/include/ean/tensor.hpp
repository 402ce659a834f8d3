#pragma once

#include <functional>
#include <memory>

#include "ean/common.hpp"

namespace ean {

// Flat element buffer. Exactly one of the two vectors is populated, selected
// by `dtype`. Storage is shared between tensors that alias the same data
// (reshape) and is never mutated once the owning tensor has entered a graph.
struct Storage {
  DType dtype = DType::f32;
  std::vector<float> f;
  std::vector<double> d;

  Storage() = default;
  Storage(DType t, std::int64_t n) : dtype(t) {
    if (t == DType::f32)
      f.assign(static_cast<std::size_t>(n), 0.f);
    else
      d.assign(static_cast<std::size_t>(n), 0.0);
  }

  std::int64_t size() const {
    return static_cast<std::int64_t>(dtype == DType::f32 ? f.size() : d.size());
  }
  double read(std::int64_t i) const {
    return dtype == DType::f32 ? static_cast<double>(f[static_cast<std::size_t>(i)])
                               : d[static_cast<std::size_t>(i)];
  }
  void write(std::int64_t i, double v) {
    if (dtype == DType::f32)
      f[static_cast<std::size_t>(i)] = static_cast<float>(v);
    else
      d[static_cast<std::size_t>(i)] = v;
  }

  template <typename T>
  std::vector<T>& get();
  template <typename T>
  const std::vector<T>& get() const;
};

template <>
inline std::vector<float>& Storage::get<float>() { return f; }
template <>
inline std::vector<double>& Storage::get<double>() { return d; }
template <>
inline const std::vector<float>& Storage::get<float>() const { return f; }
template <>
inline const std::vector<double>& Storage::get<double>() const { return d; }

// Invoke f with a value of the element type selected at runtime.
template <typename T>
struct Type {
  using type = T;
};

template <typename F>
decltype(auto) dispatch(DType t, F&& f) {
  if (t == DType::f32) return f(Type<float>{});
  return f(Type<double>{});
}

class Tensor;
using BackwardFn = std::function<void(const Tensor& grad_out)>;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Storage> data;
  bool requires_grad = false;  // leaf explicitly marked for gradients
  bool grad_path = false;      // reachable from a requires_grad leaf
  std::int64_t id = 0;         // creation order; backward replays ids descending
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn backward_fn;
  std::shared_ptr<Storage> grad;
};

// Value-semantic handle to an immutable n-d array. Operations on tensors that
// participate in a gradient path append nodes to an implicit tape; backward()
// replays that tape in exact reverse creation order, accumulating gradients
// additively across fan-out.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& s, DType t = DType::f32);
  static Tensor full(const Shape& s, double value, DType t = DType::f32);
  static Tensor from_data(const Shape& s, std::vector<float> v);
  static Tensor from_data(const Shape& s, std::vector<double> v);
  // Gaussian init, mean 0 / given stddev, drawn in row-major element order.
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0, DType t = DType::f32);
  static Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi,
                             DType t = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return ean::numel(impl_->shape); }
  DType dtype() const { return impl_->data->dtype; }

  Tensor& set_requires_grad(bool b);
  bool requires_grad() const { return impl_->requires_grad; }
  bool on_grad_path() const { return impl_->grad_path; }

  // Same values, detached from any graph (shares storage).
  Tensor detach() const;
  // Deep copy of values into a fresh leaf.
  Tensor clone() const;
  // Value-cast to another element type (detached).
  Tensor astype(DType t) const;

  bool has_grad() const { return impl_->grad != nullptr; }
  Tensor grad() const;
  void zero_grad() { impl_->grad.reset(); }

  double scalar() const;             // numel()==1 read
  double at(std::int64_t i) const { return impl_->data->read(i); }

  template <typename T>
  const std::vector<T>& vec() const {
    check_dtype_access(sizeof(T) == 4 ? DType::f32 : DType::f64);
    return impl_->data->get<T>();
  }
  // Mutable access for leaves that have not entered a graph (initialization,
  // test fixtures). Mutating a tensor already used by an op is a bug.
  template <typename T>
  std::vector<T>& mutable_vec() {
    check_dtype_access(sizeof(T) == 4 ? DType::f32 : DType::f64);
    return impl_->data->get<T>();
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  Storage& storage() const { return *impl_->data; }

 private:
  void check_dtype_access(DType want) const;
  std::shared_ptr<TensorImpl> impl_;
};

// True while gradient recording is active (default). Disable with NoGradGuard
// for evaluation passes and for arithmetic inside backward closures.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Create a graph node: `out` value already computed, `parents` are the inputs,
// `fn` accumulates into parents' grads given the node's output gradient.
// Records only if grad mode is on and some parent is on a gradient path.
void autograd_record(Tensor& out, const std::vector<Tensor>& parents, BackwardFn fn);

// Add `g` (same shape) into the gradient buffer of `t`.
void accumulate_grad(const Tensor& t, const Tensor& g);

// Reverse-mode sweep from a scalar loss. Throws if loss is not scalar or is
// not connected to any requires_grad leaf.
void backward(const Tensor& loss);

Tensor make_leaf(const Shape& s, DType t);
std::int64_t next_tensor_id();

}  // namespace ean
