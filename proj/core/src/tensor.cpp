#include "hyperpeft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "hyperpeft/error.hpp"
#include "hyperpeft/rng.hpp"
#include "tensor_impl.hpp"

namespace hyperpeft {

namespace {
thread_local bool g_grad_enabled = true;

detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw ContractError("operation on an undefined tensor");
  return *impl;
}
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }
std::size_t Tensor::ndim() const { return checked(impl_).shape.size(); }

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = checked(impl_).shape;
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  return s[axis];
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(checked(impl_).data.size());
}

std::span<const double> Tensor::data() const { return checked(impl_).data; }
std::span<double> Tensor::mutable_data() { return checked(impl_).data; }

double Tensor::item() const {
  const auto& impl = checked(impl_);
  if (impl.data.size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(impl.shape));
  }
  return impl.data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& impl = checked(impl_);
  if (index.size() != impl.shape.size()) {
    throw ShapeError("index rank mismatch for " + shape_str(impl.shape));
  }
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= impl.shape[axis]) throw ShapeError("index out of range");
    flat = flat * impl.shape[axis] + i;
    ++axis;
  }
  return impl.data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  auto& impl = checked(impl_);
  if (impl.node && !flag) {
    throw ContractError("cannot clear requires_grad on a non-leaf tensor");
  }
  impl.requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).node == nullptr; }

bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (impl.grad.empty() && !impl.data.empty()) {
    throw ContractError("tensor has no gradient");
  }
  return impl.grad;
}

std::span<double> Tensor::mutable_grad() {
  return checked(impl_).grad_buffer();
}

void Tensor::zero_grad() { checked(impl_).grad.clear(); }

Tensor Tensor::clone() const {
  const auto& impl = checked(impl_);
  return from_data(impl.shape, impl.data, false);
}

Tensor Tensor::clone_leaf() const {
  const auto& impl = checked(impl_);
  return from_data(impl.shape, impl.data, impl.requires_grad);
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   const char* name, BackwardFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || needs_grad(*t);
    if (any) {
      auto node = std::make_shared<Node>();
      node->name = name;
      node->inputs.reserve(inputs.size());
      for (const Tensor* t : inputs) node->inputs.push_back(t->shared_impl());
      node->backward = std::move(fn);
      impl->node = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, const char* name,
                   BackwardFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || needs_grad(t);
    if (any) {
      auto node = std::make_shared<Node>();
      node->name = name;
      node->inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) node->inputs.push_back(t.shared_impl());
      node->backward = std::move(fn);
      impl->node = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  detail::TensorImpl* root = loss.impl();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::TensorImpl*> order;
  // Resetting a node may drop the last reference to its inputs.
  std::vector<std::shared_ptr<detail::TensorImpl>> keep_alive;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      const auto& child = impl->node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        keep_alive.push_back(child);
        stack.emplace_back(child.get(), 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* impl = *it;
    if (impl->node && !impl->grad.empty()) impl->node->backward(*impl);
  }
  for (detail::TensorImpl* impl : order) impl->node.reset();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor ParameterSet::add(std::string name, Tensor tensor) {
  if (find(name)) throw ContractError("duplicate parameter name: " + name);
  if (!tensor.is_leaf()) throw ContractError("parameter must be a leaf: " + name);
  tensor.set_requires_grad(true);
  items_.push_back({std::move(name), tensor, false});
  return tensor;
}

void ParameterSet::append(const ParameterSet& other) {
  for (const auto& p : other.items_) {
    if (find(p.name)) throw ContractError("duplicate parameter name: " + p.name);
    items_.push_back(p);
  }
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParameterSet::set_frozen(bool frozen) {
  // Frozen leaves stop requiring grad so backward skips their subgraphs.
  for (auto& p : items_) {
    p.frozen = frozen;
    p.tensor.set_requires_grad(!frozen);
  }
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

std::int64_t ParameterSet::numel() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParameterSet::copy_values_from(const ParameterSet& source) {
  if (source.size() != size()) {
    throw ShapeError("parameter count mismatch: " +
                     std::to_string(source.size()) + " vs " +
                     std::to_string(size()));
  }
  for (auto& p : items_) {
    const Parameter* src = source.find(p.name);
    if (!src) throw ShapeError("missing parameter: " + p.name);
    if (src->tensor.shape() != p.tensor.shape()) {
      throw ShapeError("shape mismatch for " + p.name + ": " +
                       shape_str(src->tensor.shape()) + " vs " +
                       shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    auto values = src->tensor.data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
  for (auto p : params) p.zero_grad();
  backward(f());

  // (param index, flat index)
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::int64_t j = 0; j < params[i].numel(); ++j) {
      coords.emplace_back(i, static_cast<std::size_t>(j));
    }
  }
  if (options.max_coords > 0 &&
      coords.size() > static_cast<std::size_t>(options.max_coords)) {
    Rng rng(options.seed);
    auto picked = rng.sample_indices(coords.size(),
                                     static_cast<std::size_t>(options.max_coords));
    std::sort(picked.begin(), picked.end());
    std::vector<std::pair<std::size_t, std::size_t>> subset;
    subset.reserve(picked.size());
    for (auto k : picked) subset.push_back(coords[k]);
    coords = std::move(subset);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [pi, j] : coords) {
    Tensor p = params[pi];
    const double analytic = p.has_grad() ? p.grad()[j] : 0.0;
    auto values = p.mutable_data();
    const double saved = values[j];
    auto at = [&](double dx) {
      values[j] = saved + dx;
      return f().item();
    };
    const double h = options.eps;
    // Five-point stencil: O(h^4) truncation lets h stay large enough to keep
    // cancellation noise small.
    const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    values[j] = saved;
    const double denom = std::max(
        {std::abs(analytic), std::abs(numeric), options.denom_floor});
    result.max_rel_error =
        std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
    ++result.coords_checked;
  }
  return result;
}

void round_to_f32(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace hyperpeft
