#include "hyperpeft/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hyperpeft/error.hpp"
#include "tensor_impl.hpp"

namespace hyperpeft {

namespace {

using detail::make_result;
using detail::needs_grad;
using detail::TensorImpl;

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MutMap = Eigen::Map<RowMat>;

void require_ndim(const Tensor& t, std::size_t n, const char* op) {
  if (t.ndim() != n) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) +
                     "-d tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

int normalize_axis(int axis, std::size_t ndim, const char* op) {
  const int n = static_cast<int>(ndim);
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) {
    throw ShapeError(std::string(op) + ": axis out of range");
  }
  return axis;
}

// (outer, length, inner) decomposition of `shape` around `axis`.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t length = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

MutMap as_matrix(std::vector<double>& v, std::int64_t rows,
                 std::int64_t cols) {
  return MutMap(v.data(), rows, cols);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() =
      as_matrix(a.impl()->data, m, k) * as_matrix(b.impl()->data, k, n);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_result({m, n}, std::move(out), {&a, &b}, "matmul",
                     [ai, bi, m, k, n](TensorImpl& o) {
                       auto dc = as_matrix(o.grad, m, n);
                       if (ai->requires_grad) {
                         as_matrix(ai->grad_buffer(), m, k).noalias() +=
                             dc * as_matrix(bi->data, k, n).transpose();
                       }
                       if (bi->requires_grad) {
                         as_matrix(bi->grad_buffer(), k, n).noalias() +=
                             as_matrix(ai->data, m, k).transpose() * dc;
                       }
                     });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul_bt");
  require_ndim(b, 2, "matmul_bt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_bt: inner dimensions differ " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() =
      as_matrix(a.impl()->data, m, k) *
      as_matrix(b.impl()->data, n, k).transpose();
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_result({m, n}, std::move(out), {&a, &b}, "matmul_bt",
                     [ai, bi, m, k, n](TensorImpl& o) {
                       auto dc = as_matrix(o.grad, m, n);
                       if (ai->requires_grad) {
                         as_matrix(ai->grad_buffer(), m, k).noalias() +=
                             dc * as_matrix(bi->data, n, k);
                       }
                       if (bi->requires_grad) {
                         as_matrix(bi->grad_buffer(), n, k).noalias() +=
                             dc.transpose() * as_matrix(ai->data, m, k);
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& x = a.impl()->data;
  const auto& y = b.impl()->data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, "add",
                     [ai, bi](TensorImpl& o) {
                       for (TensorImpl* t : {ai, bi}) {
                         if (!t->requires_grad) continue;
                         auto& g = t->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += o.grad[i];
                         }
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& x = a.impl()->data;
  const auto& y = b.impl()->data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, "sub",
                     [ai, bi](TensorImpl& o) {
                       if (ai->requires_grad) {
                         auto& g = ai->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += o.grad[i];
                         }
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] -= o.grad[i];
                         }
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& x = a.impl()->data;
  const auto& y = b.impl()->data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, "mul",
                     [ai, bi](TensorImpl& o) {
                       if (ai->requires_grad) {
                         auto& g = ai->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += o.grad[i] * bi->data[i];
                         }
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += o.grad[i] * ai->data[i];
                         }
                       }
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_ndim(bias, 1, "add_bias");
  if (x.ndim() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                     " does not match trailing axis of " + shape_str(x.shape()));
  }
  const auto n = static_cast<std::size_t>(bias.dim(0));
  const auto& xv = x.impl()->data;
  const auto& bv = bias.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + bv[i % n];
  TensorImpl* xi = x.impl();
  TensorImpl* bi = bias.impl();
  return make_result(x.shape(), std::move(out), {&x, &bias}, "add_bias",
                     [xi, bi, n](TensorImpl& o) {
                       if (xi->requires_grad) {
                         auto& g = xi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += o.grad[i];
                         }
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < o.grad.size(); ++i) {
                           g[i % n] += o.grad[i];
                         }
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  TensorImpl* xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, "scale",
                     [xi, factor](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += o.grad[i] * factor;
                       }
                     });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar: expected single-element scale, got " +
                     shape_str(s.shape()));
  }
  const double sv = s.impl()->data[0];
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sv * xv[i];
  TensorImpl* xi = x.impl();
  TensorImpl* si = s.impl();
  return make_result(x.shape(), std::move(out), {&x, &s}, "mul_scalar",
                     [xi, si](TensorImpl& o) {
                       if (xi->requires_grad) {
                         auto& g = xi->grad_buffer();
                         const double sv = si->data[0];
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += sv * o.grad[i];
                         }
                       }
                       if (si->requires_grad) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < o.grad.size(); ++i) {
                           acc += o.grad[i] * xi->data[i];
                         }
                         si->grad_buffer()[0] += acc;
                       }
                     });
}

Tensor relu(const Tensor& x) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  TensorImpl* xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, "relu",
                     [xi](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (xi->data[i] > 0.0) g[i] += o.grad[i];
                       }
                     });
}

Tensor tanh(const Tensor& x) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  TensorImpl* xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, "tanh",
                     [xi](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
                       }
                     });
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.ndim(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < s.length; ++j) {
        mx = std::max(mx, xv[base + j * s.inner]);
      }
      if (s.length > 0 && std::isinf(mx) && mx < 0) {
        throw NumericError("softmax: every entry of a slice is -inf (masking bug)");
      }
      double total = 0.0;
      for (std::int64_t j = 0; j < s.length; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= total;
    }
  }
  TensorImpl* xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, "softmax",
                     [xi, s](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t a = 0; a < s.outer; ++a) {
                         for (std::int64_t in = 0; in < s.inner; ++in) {
                           const std::int64_t base = a * s.length * s.inner + in;
                           double dot = 0.0;
                           for (std::int64_t j = 0; j < s.length; ++j) {
                             const auto k = base + j * s.inner;
                             dot += o.grad[k] * o.data[k];
                           }
                           for (std::int64_t j = 0; j < s.length; ++j) {
                             const auto k = base + j * s.inner;
                             g[k] += o.data[k] * (o.grad[k] - dot);
                           }
                         }
                       }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_ndim(gain, 1, "rms_norm");
  if (x.ndim() == 0 || x.shape().back() != gain.dim(0)) {
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) +
                     " does not match trailing axis of " + shape_str(x.shape()));
  }
  const auto h = static_cast<std::size_t>(gain.dim(0));
  const auto& xv = x.impl()->data;
  const auto& gv = gain.impl()->data;
  const std::size_t rows = h == 0 ? 0 : xv.size() / h;
  std::vector<double> out(xv.size());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t i = 0; i < h; ++i) ms += xv[r * h + i] * xv[r * h + i];
    ms /= static_cast<double>(h);
    inv[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < h; ++i) {
      out[r * h + i] = xv[r * h + i] * inv[r] * gv[i];
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gain.impl();
  return make_result(
      x.shape(), std::move(out), {&x, &gain}, "rms_norm",
      [xi, gi, h, rows, inv = std::move(inv)](TensorImpl& o) {
        const auto& xv = xi->data;
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < h; ++i) {
              gg[i] += o.grad[r * h + i] * xv[r * h + i] * inv[r];
            }
          }
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          const auto& gv = gi->data;
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
              dot += o.grad[r * h + i] * gv[i] * xv[r * h + i];
            }
            const double c = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(h);
            for (std::size_t i = 0; i < h; ++i) {
              gx[r * h + i] += inv[r] * gv[i] * o.grad[r * h + i] - c * xv[r * h + i];
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     TokenId pad_id) {
  require_ndim(logits, 2, "cross_entropy");
  const auto t_len = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != t_len) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  const auto& lv = logits.impl()->data;
  std::int64_t count = 0;
  for (auto y : targets) {
    if (y == pad_id) continue;
    if (y < 0 || y >= v) {
      throw ContractError("cross_entropy: target id " + std::to_string(y) +
                          " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  std::vector<double> probs(lv.size(), 0.0);
  double total = 0.0;
  for (std::int64_t t = 0; t < t_len; ++t) {
    if (targets[t] == pad_id) continue;
    const double* row = lv.data() + t * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[t]];
    for (std::int64_t j = 0; j < v; ++j) {
      probs[t * v + j] = std::exp(row[j] - lse);
    }
  }
  const double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  TensorImpl* li = logits.impl();
  std::vector<TokenId> ys(targets.begin(), targets.end());
  return make_result(
      {}, {loss}, {&logits}, "cross_entropy",
      [li, v, count, pad_id, ys = std::move(ys),
       probs = std::move(probs)](TensorImpl& o) {
        auto& g = li->grad_buffer();
        if (count == 0) return;
        const double scale = o.grad[0] / static_cast<double>(count);
        for (std::size_t t = 0; t < ys.size(); ++t) {
          if (ys[t] == pad_id) continue;
          for (std::int64_t j = 0; j < v; ++j) {
            g[t * v + j] += scale * probs[t * v + j];
          }
          g[t * v + ys[t]] -= scale;
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_ndim(table, 2, "embedding");
  const auto v = table.dim(0), h = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  const auto& tv = table.impl()->data;
  std::vector<double> out(static_cast<std::size_t>(n * h));
  for (std::int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) +
                          " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(tv.begin() + ids[i] * h, h, out.begin() + i * h);
  }
  TensorImpl* ti = table.impl();
  std::vector<TokenId> idv(ids.begin(), ids.end());
  return make_result({n, h}, std::move(out), {&table}, "embedding",
                     [ti, h, idv = std::move(idv)](TensorImpl& o) {
                       auto& g = ti->grad_buffer();
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         for (std::int64_t j = 0; j < h; ++j) {
                           g[idv[i] * h + j] += o.grad[i * h + j];
                         }
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int ax = normalize_axis(axis, parts[0].ndim(), "concat");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (static_cast<int>(d) != ax && p.shape()[d] != shape[d]) {
        throw ShapeError("concat: incompatible shapes " + shape_str(shape) +
                         " and " + shape_str(p.shape()));
      }
    }
    total += p.shape()[ax];
  }
  shape[ax] = total;
  const AxisSplit s = split_at(shape, ax);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<std::int64_t> offsets;
  std::vector<TensorImpl*> impls;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t chunk = p.shape()[ax] * s.inner;
    const auto& pv = p.impl()->data;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + o * chunk, chunk,
                  out.begin() + o * total * s.inner + offset * s.inner);
    }
    offsets.push_back(offset);
    impls.push_back(p.impl());
    offset += p.shape()[ax];
  }
  return make_result(
      shape, std::move(out), parts, "concat",
      [s, total, offsets = std::move(offsets),
       impls = std::move(impls)](TensorImpl& o) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          TensorImpl* p = impls[k];
          if (!p->requires_grad) continue;
          auto& g = p->grad_buffer();
          const std::int64_t chunk =
              static_cast<std::int64_t>(p->data.size()) / std::max<std::int64_t>(s.outer, 1);
          for (std::int64_t a = 0; a < s.outer; ++a) {
            const double* src = o.grad.data() + a * total * s.inner + offsets[k] * s.inner;
            double* dst = g.data() + a * chunk;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end) {
  const int ax = normalize_axis(axis, x.ndim(), "slice");
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin < 0 || end < begin || end > s.length) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[ax] = end - begin;
  const std::int64_t chunk = (end - begin) * s.inner;
  std::vector<double> out(static_cast<std::size_t>(s.outer * chunk));
  const auto& xv = x.impl()->data;
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + o * s.length * s.inner + begin * s.inner, chunk,
                out.begin() + o * chunk);
  }
  TensorImpl* xi = x.impl();
  return make_result(shape, std::move(out), {&x}, "slice",
                     [xi, s, begin, chunk](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t a = 0; a < s.outer; ++a) {
                         double* dst = g.data() + a * s.length * s.inner + begin * s.inner;
                         const double* src = o.grad.data() + a * chunk;
                         for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  TensorImpl* xi = x.impl();
  return make_result(std::move(shape), x.impl()->data, {&x}, "reshape",
                     [xi](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const std::size_t nd = x.ndim();
  if (axes.size() != nd) throw ShapeError("permute: axis count mismatch");
  std::vector<bool> seen(nd, false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= nd || seen[a]) {
      throw ShapeError("permute: invalid axis permutation");
    }
    seen[a] = true;
  }
  const Shape& in_shape = x.shape();
  std::vector<std::int64_t> in_strides(nd, 1);
  for (std::size_t d = nd; d-- > 1;) in_strides[d - 1] = in_strides[d] * in_shape[d];
  Shape out_shape(nd);
  std::vector<std::int64_t> strides(nd);  // input stride per output axis
  for (std::size_t d = 0; d < nd; ++d) {
    out_shape[d] = in_shape[axes[d]];
    strides[d] = in_strides[axes[d]];
  }
  // map[k] = input flat index of output element k
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<std::int64_t> map(n);
  std::vector<std::int64_t> idx(nd, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::int64_t src = 0;
    for (std::size_t d = 0; d < nd; ++d) src += idx[d] * strides[d];
    map[k] = src;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  const auto& xv = x.impl()->data;
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = xv[map[k]];
  TensorImpl* xi = x.impl();
  return make_result(out_shape, std::move(out), {&x}, "permute",
                     [xi, map = std::move(map)](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t k = 0; k < map.size(); ++k) {
                         g[map[k]] += o.grad[k];
                       }
                     });
}

Tensor select(const Tensor& x, std::initializer_list<std::int64_t> leading) {
  const Shape& shape = x.shape();
  if (leading.size() > shape.size()) throw ShapeError("select: too many indices");
  std::int64_t offset = 0;
  std::size_t d = 0;
  for (auto i : leading) {
    if (i < 0 || i >= shape[d]) {
      throw ShapeError("select: index " + std::to_string(i) +
                       " out of range for " + shape_str(shape));
    }
    offset = offset * shape[d] + i;
    ++d;
  }
  Shape out_shape(shape.begin() + static_cast<std::ptrdiff_t>(leading.size()),
                  shape.end());
  const std::int64_t block = shape_numel(out_shape);
  offset *= block;
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.begin() + offset, xv.begin() + offset + block);
  TensorImpl* xi = x.impl();
  return make_result(out_shape, std::move(out), {&x}, "select",
                     [xi, offset, block](TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t i = 0; i < block; ++i) {
                         g[offset + i] += o.grad[i];
                       }
                     });
}

Tensor element(const Tensor& x, std::int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.numel()) {
    throw ShapeError("element: index out of range");
  }
  TensorImpl* xi = x.impl();
  return make_result({}, {x.impl()->data[flat_index]}, {&x}, "element",
                     [xi, flat_index](TensorImpl& o) {
                       xi->grad_buffer()[flat_index] += o.grad[0];
                     });
}

Tensor sum(const Tensor& x) {
  const auto& xv = x.impl()->data;
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  TensorImpl* xi = x.impl();
  return make_result({}, {total}, {&x}, "sum", [xi](TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor causal_mask(const Tensor& scores, std::int64_t n_prefix) {
  require_ndim(scores, 2, "causal_mask");
  const auto tq = scores.dim(0), tk = scores.dim(1);
  if (n_prefix < 0 || n_prefix > tk) throw ShapeError("causal_mask: bad prefix");
  std::vector<double> out = scores.impl()->data;
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < tq; ++i) {
    for (std::int64_t j = n_prefix + i + 1; j < tk; ++j) out[i * tk + j] = neg_inf;
  }
  TensorImpl* si = scores.impl();
  return make_result(scores.shape(), std::move(out), {&scores}, "causal_mask",
                     [si, tq, tk, n_prefix](TensorImpl& o) {
                       auto& g = si->grad_buffer();
                       for (std::int64_t i = 0; i < tq; ++i) {
                         const std::int64_t visible = std::min(tk, n_prefix + i + 1);
                         for (std::int64_t j = 0; j < visible; ++j) {
                           g[i * tk + j] += o.grad[i * tk + j];
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace hyperpeft
