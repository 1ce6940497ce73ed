#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hyperpeft/tensor.hpp"
#include "hyperpeft/vocab.hpp"

// Differentiable operations over Tensor.
//
// Broadcasting is deliberately limited to a trailing-axis bias (add_bias) and
// multiplication by a single-element tensor (mul_scalar); every other shape
// mismatch raises ShapeError.
namespace hyperpeft {

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// [M,K] x [N,K]^T -> [M,N]
Tensor matmul_bt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[..., N] + bias[N]
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
// s * x where s holds exactly one element.
Tensor mul_scalar(const Tensor& x, const Tensor& s);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

// Numerically stable softmax along `axis` (negative counts from the end).
// A slice consisting entirely of -inf raises NumericError: it means every
// position was masked.
Tensor softmax(const Tensor& x, int axis = -1);

// y = x / sqrt(mean(x^2) + eps) * gain, over the trailing axis.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// Mean token negative log-likelihood of `targets` under `logits` [T,V].
// Positions whose target equals `pad_id` are excluded; an all-pad target
// yields 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     TokenId pad_id);

// Rows of `table` [V,H] gathered by id -> [T,H].
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
// Contiguous sub-block addressed by leading indices, e.g. select(p, {l, 0, 1})
// on [L,2,2,P,H] gives [P,H].
Tensor select(const Tensor& x, std::initializer_list<std::int64_t> leading);
// Single element by flat index, as a 0-d tensor.
Tensor element(const Tensor& x, std::int64_t flat_index);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// scores [Tq, n_prefix + Tk]: key j >= n_prefix is hidden from query i when
// j - n_prefix > i. Prefix columns are never masked.
Tensor causal_mask(const Tensor& scores, std::int64_t n_prefix);

// x @ w + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace hyperpeft
