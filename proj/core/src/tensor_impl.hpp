#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hyperpeft/tensor.hpp"

namespace hyperpeft::detail {

struct TensorImpl;

// A recorded operation. `backward` reads the output's gradient and
// accumulates into the gradients of `inputs` that require one.
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  std::vector<double>& grad_buffer() {
    if (grad.empty() && !data.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using BackwardFn = std::function<void(TensorImpl& out)>;

// Wraps freshly computed output values and, when recording is active and any
// input needs a gradient, attaches a tape node with `fn`.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   const char* name, BackwardFn fn);
Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, const char* name,
                   BackwardFn fn);

inline bool needs_grad(const Tensor& t) {
  return t.defined() && t.impl()->requires_grad;
}

}  // namespace hyperpeft::detail
