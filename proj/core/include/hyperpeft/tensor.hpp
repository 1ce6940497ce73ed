#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hyperpeft {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}  // namespace detail

// Dense row-major array of doubles with an optional gradient slot.
//
// Tensor is a shared handle: copies alias the same storage, which is what
// lets a parameter held by a model also appear in many recorded graphs. Use
// clone() for an independent copy. Operations applied while gradient
// recording is enabled and at least one input requires a gradient record a
// node on a dynamic tape; backward() walks that tape once and releases it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const;
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the tape; only use on leaves or outside of a live graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Independent copy of the values; not connected to any graph.
  Tensor clone() const;
  // Same as clone() but keeps requires_grad, producing a fresh trainable leaf.
  Tensor clone_leaf() const;

  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared_impl() const noexcept {
    return impl_;
  }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Back-propagates from a scalar loss. Leaf gradients accumulate across calls;
// the recorded graph is released afterwards.
void backward(const Tensor& loss);

bool grad_enabled() noexcept;

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;
};

// Ordered, uniquely named collection of trainable leaves.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor tensor);
  void append(const ParameterSet& other);

  std::vector<Parameter>& items() & noexcept { return items_; }
  const std::vector<Parameter>& items() const& noexcept { return items_; }
  // Safe in range-for over a temporary set.
  std::vector<Parameter> items() && { return std::move(items_); }
  std::size_t size() const noexcept { return items_.size(); }
  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);

  void set_frozen(bool frozen);
  void zero_grad();
  std::int64_t numel() const;

  // Copies values (not handles) from `source`; names and shapes must match.
  void copy_values_from(const ParameterSet& source);

 private:
  std::vector<Parameter> items_;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Relative error denominator floor, so that exactly-zero gradients compare
  // by absolute error.
  double denom_floor = 1e-6;
  // Number of coordinates probed; <= 0 checks every coordinate.
  int max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
};

// Compares analytic gradients of `f` against five-point finite differences.
// `f` must be deterministic and must rebuild its graph on every call.
GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

// Rounds every value through single precision in place.
void round_to_f32(std::span<double> values);

}  // namespace hyperpeft
