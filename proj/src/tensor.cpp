#include "ean/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace ean {

namespace {
std::atomic<std::int64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

std::int64_t next_tensor_id() { return g_next_id.fetch_add(1); }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor make_leaf(const Shape& s, DType t) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data = std::make_shared<Storage>(t, numel(s));
  impl->id = g_next_id.fetch_add(1);
  return Tensor(impl);
}

Tensor Tensor::zeros(const Shape& s, DType t) { return make_leaf(s, t); }

Tensor Tensor::full(const Shape& s, double value, DType t) {
  Tensor out = make_leaf(s, t);
  dispatch(t, [&]<typename T>(Type<T>) {
    auto& v = out.impl()->data->get<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return out;
}

Tensor Tensor::from_data(const Shape& s, std::vector<float> v) {
  check(static_cast<std::int64_t>(v.size()) == ean::numel(s),
        "from_data: " + std::to_string(v.size()) + " values for shape " + shape_str(s));
  Tensor out = make_leaf(s, DType::f32);
  out.impl()->data->f = std::move(v);
  return out;
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v) {
  check(static_cast<std::int64_t>(v.size()) == ean::numel(s),
        "from_data: " + std::to_string(v.size()) + " values for shape " + shape_str(s));
  Tensor out = make_leaf(s, DType::f64);
  out.impl()->data->d = std::move(v);
  return out;
}

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev, DType t) {
  Tensor out = make_leaf(s, t);
  std::normal_distribution<double> dist(0.0, stddev);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.impl()->data->write(i, dist(rng));
  return out;
}

Tensor Tensor::rand_uniform(const Shape& s, Rng& rng, double lo, double hi, DType t) {
  Tensor out = make_leaf(s, t);
  std::uniform_real_distribution<double> dist(lo, hi);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.impl()->data->write(i, dist(rng));
  return out;
}

Tensor& Tensor::set_requires_grad(bool b) {
  impl_->requires_grad = b;
  impl_->grad_path = b || !impl_->parents.empty();
  return *this;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->id = g_next_id.fetch_add(1);
  return Tensor(impl);
}

Tensor Tensor::clone() const {
  Tensor out = make_leaf(impl_->shape, dtype());
  *out.impl()->data = *impl_->data;
  return out;
}

Tensor Tensor::astype(DType t) const {
  if (t == dtype()) return clone();
  Tensor out = make_leaf(impl_->shape, t);
  const std::int64_t n = numel();
  for (std::int64_t i = 0; i < n; ++i) out.impl()->data->write(i, impl_->data->read(i));
  return out;
}

Tensor Tensor::grad() const {
  check(impl_->grad != nullptr, "grad(): no gradient recorded for this tensor");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->grad;
  impl->id = g_next_id.fetch_add(1);
  return Tensor(impl);
}

double Tensor::scalar() const {
  check(numel() == 1, "scalar(): tensor has shape " + shape_str(impl_->shape));
  return impl_->data->read(0);
}

void Tensor::check_dtype_access(DType want) const {
  check(dtype() == want, std::string("element access as ") + dtype_name(want) +
                             " but tensor is " + dtype_name(dtype()));
}

void autograd_record(Tensor& out, const std::vector<Tensor>& parents, BackwardFn fn) {
  if (!g_grad_enabled) return;
  bool needed = false;
  for (const auto& p : parents) needed = needed || p.impl()->grad_path;
  if (!needed) return;
  auto& impl = *out.impl();
  impl.grad_path = true;
  impl.parents.reserve(parents.size());
  for (const auto& p : parents) impl.parents.push_back(p.impl());
  impl.backward_fn = std::move(fn);
}

void accumulate_grad(const Tensor& t, const Tensor& g) {
  auto& impl = *t.impl();
  check(g.shape() == impl.shape, "gradient shape " + shape_str(g.shape()) +
                                     " does not match tensor shape " + shape_str(impl.shape));
  if (!impl.grad) impl.grad = std::make_shared<Storage>(t.dtype(), t.numel());
  const std::int64_t n = t.numel();
  dispatch(t.dtype(), [&]<typename T>(Type<T>) {
    auto& acc = impl.grad->get<T>();
    const auto& src = g.impl()->data->get<T>();
    for (std::int64_t i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] +=
        src[static_cast<std::size_t>(i)];
  });
}

void backward(const Tensor& loss) {
  check(loss.defined(), "backward: undefined tensor");
  check(loss.numel() == 1,
        "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  check(loss.impl()->grad_path,
        "backward: loss does not belong to an active graph (no requires_grad inputs)");

  // Collect the reachable subgraph, then replay strictly by descending
  // creation id: that is the reverse of append order restricted to this graph.
  std::vector<TensorImpl*> nodes;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> stack{loss.impl()};
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto cur = stack.back();
    stack.pop_back();
    nodes.push_back(cur.get());
    for (auto& p : cur->parents) {
      if (p->grad_path && seen.insert(p.get()).second) stack.push_back(p);
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](TensorImpl* a, TensorImpl* b) { return a->id > b->id; });

  loss.impl()->grad = std::make_shared<Storage>(loss.dtype(), 1);
  loss.impl()->grad->write(0, 1.0);

  NoGradGuard ng;
  for (TensorImpl* n : nodes) {
    if (!n->backward_fn || !n->grad) continue;
    auto gimpl = std::make_shared<TensorImpl>();
    gimpl->shape = n->shape;
    gimpl->data = n->grad;
    gimpl->id = 0;
    n->backward_fn(Tensor(gimpl));
  }
}

}  // namespace ean
