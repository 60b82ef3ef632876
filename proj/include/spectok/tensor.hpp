#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spectok/errors.hpp"

namespace spectok {

// ==================== Graph node ====================

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Distributes this node's grad into parents' grads. Never captures the node
  // itself (passed by reference) so the graph stays cycle-free and frees
  // deterministically when the last handle drops.
  std::function<void(const TensorNode&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
};

namespace detail {

inline std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void ensure_grad(TensorNode& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

}  // namespace detail

// ==================== Tensor handle ====================

// Shared handle to a graph node. Copies alias the same storage; ops build the
// autodiff graph eagerly. Scalars are represented as shape [1].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : Tensor(std::move(shape), 0.0) {}

  Tensor(std::vector<std::size_t> shape, double fill) {
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data.assign(detail::numel(node_->shape), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data) {
    if (detail::numel(shape) != data.size()) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + detail::shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  bool defined() const { return node_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return check()->shape; }
  std::size_t rank() const { return check()->shape.size(); }
  std::size_t size() const { return check()->data.size(); }

  std::vector<double>& data() { return check()->data; }
  const std::vector<double>& data() const { return check()->data; }

  double item() const {
    if (size() != 1) {
      throw ContractError("item() requires a single-element tensor, got shape " +
                          detail::shape_str(shape()));
    }
    return check()->data[0];
  }

  // 2-D element access, row-major.
  double& at(std::size_t r, std::size_t c) {
    auto& n = *check();
    if (n.shape.size() != 2 || r >= n.shape[0] || c >= n.shape[1]) {
      throw ShapeError("at(" + std::to_string(r) + ", " + std::to_string(c) +
                       ") out of range for shape " + detail::shape_str(n.shape));
    }
    return n.data[r * n.shape[1] + c];
  }
  double at(std::size_t r, std::size_t c) const {
    return const_cast<Tensor*>(this)->at(r, c);
  }

  bool requires_grad() const { return check()->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    if (!check()->is_leaf()) {
      throw ContractError("set_requires_grad is only valid on leaf tensors");
    }
    node_->requires_grad = v;
    return *this;
  }

  bool is_leaf() const { return check()->is_leaf(); }

  bool has_grad() const { return check()->grad.size() == node_->data.size(); }

  const std::vector<double>& grad() const {
    if (!has_grad()) {
      throw ContractError("grad() called before any backward reached this tensor");
    }
    return node_->grad;
  }

  void zero_grad() { check()->grad.assign(node_->data.size(), 0.0); }

  // New leaf with copied data, detached from the graph.
  Tensor detach() const {
    return Tensor(check()->shape, node_->data);
  }

  const std::shared_ptr<TensorNode>& node() const { return *&node_; }

 private:
  std::shared_ptr<TensorNode> node_;

  const std::shared_ptr<TensorNode>& check() const {
    if (!node_) throw ContractError("operation on default-constructed tensor");
    return node_;
  }
};

namespace detail {

inline Tensor make_result(std::vector<std::size_t> shape,
                          std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(const TensorNode&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n.parents.push_back(t.node());
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

// ==================== Broadcasting ====================

inline std::vector<std::size_t> bcast_shape(const std::vector<std::size_t>& a,
                                            const std::vector<std::size_t>& b,
                                            const char* op) {
  std::size_t rank = std::max(a.size(), b.size());
  std::vector<std::size_t> out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides padded to out rank, zeroed on broadcast axes.
inline std::vector<std::size_t> bcast_strides(
    const std::vector<std::size_t>& shape,
    const std::vector<std::size_t>& out_shape) {
  std::size_t rank = out_shape.size();
  std::size_t pad = rank - shape.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[pad + i] = (shape[i] == 1 && out_shape[pad + i] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// Maps a flat index in out_shape to a flat index of an operand.
inline std::size_t map_index(std::size_t flat,
                             const std::vector<std::size_t>& out_shape,
                             const std::vector<std::size_t>& strides) {
  std::size_t idx = 0;
  for (std::size_t i = out_shape.size(); i-- > 0;) {
    idx += (flat % out_shape[i]) * strides[i];
    flat /= out_shape[i];
  }
  return idx;
}

template <class F, class DA, class DB>
Tensor binary_bcast(const Tensor& a, const Tensor& b, const char* op, F f,
                    DA dfda, DB dfdb) {
  auto out_shape = bcast_shape(a.shape(), b.shape(), op);
  auto sa = bcast_strides(a.shape(), out_shape);
  auto sb = bcast_strides(b.shape(), out_shape);
  std::size_t n = numel(out_shape);
  std::vector<double> out(n);
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(da[map_index(i, out_shape, sa)], db[map_index(i, out_shape, sb)]);
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_result(
      out_shape, std::move(out), {a, b},
      [pa, pb, out_shape, sa, sb, dfda, dfdb](const TensorNode& self) {
        for (std::size_t i = 0; i < self.data.size(); ++i) {
          double g = self.grad[i];
          std::size_t ia = map_index(i, out_shape, sa);
          std::size_t ib = map_index(i, out_shape, sb);
          double av = pa->data[ia];
          double bv = pb->data[ib];
          if (pa->requires_grad) {
            ensure_grad(*pa);
            pa->grad[ia] += dfda(av, bv) * g;
          }
          if (pb->requires_grad) {
            ensure_grad(*pb);
            pb->grad[ib] += dfdb(av, bv) * g;
          }
        }
      });
}

template <class F, class DF>
Tensor unary_elem(const Tensor& a, F f, DF dfdx) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i]);
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {a},
                     [pa, dfdx](const TensorNode& self) {
                       if (!pa->requires_grad) return;
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < self.data.size(); ++i) {
                         pa->grad[i] += dfdx(pa->data[i]) * self.grad[i];
                       }
                     });
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " requires a rank-2 tensor, got shape " +
                     shape_str(t.shape()));
  }
}

}  // namespace detail

// ==================== Elementwise ops ====================

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_bcast(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_bcast(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_bcast(
      a, b, "mul", [](double x, double y) { return x * y; },
      // d(a*b)/da = b, d(a*b)/db = a
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

// Caller guarantees b has no zero entries.
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_bcast(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_elem(
      a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Tensor shift(const Tensor& a, double c) {
  return detail::unary_elem(
      a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

// Exact GELU: x * Phi(x) with the Gaussian CDF, not the tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_elem(
      a,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      // d/dx = Phi(x) + x * phi(x)
      [=](double x) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// Caller guarantees strictly positive entries.
inline Tensor sqrt(const Tensor& a) {
  return detail::unary_elem(
      a, [](double x) { return std::sqrt(x); },
      [](double x) { return 0.5 / std::sqrt(x); });
}

// ==================== Matrix ops ====================

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  std::size_t m = a.shape()[0], k = a.shape()[1];
  std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = da[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * db[p * n + j];
    }
  }
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [pa, pb, m, k, n](const TensorNode& self) {
        // dA = G B^T, dB = A^T G
        if (pa->requires_grad) {
          detail::ensure_grad(*pa);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              double g = self.grad[i * n + j];
              for (std::size_t p = 0; p < k; ++p) {
                pa->grad[i * k + p] += g * pb->data[p * n + j];
              }
            }
          }
        }
        if (pb->requires_grad) {
          detail::ensure_grad(*pb);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double av = pa->data[i * k + p];
              for (std::size_t j = 0; j < n; ++j) {
                pb->grad[p * n + j] += av * self.grad[i * n + j];
              }
            }
          }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
  }
  auto pa = a.node();
  return detail::make_result({n, m}, std::move(out), {a},
                             [pa, m, n](const TensorNode& self) {
                               if (!pa->requires_grad) return;
                               detail::ensure_grad(*pa);
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                   pa->grad[i * n + j] += self.grad[j * m + i];
                                 }
                               }
                             });
}

// Row-wise softmax with the max-subtraction trick.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_rank2(a, "softmax_rows");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = da[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, da[i * n + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(da[i * n + j] - mx);
      sum += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  auto pa = a.node();
  return detail::make_result(
      {m, n}, std::move(out), {a},
      [pa, m, n](const TensorNode& self) {
        if (!pa->requires_grad) return;
        detail::ensure_grad(*pa);
        // din = s * (g - <g, s>) per row
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dot += self.grad[i * n + j] * self.data[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            pa->grad[i * n + j] +=
                self.data[i * n + j] * (self.grad[i * n + j] - dot);
          }
        }
      });
}

// ==================== Reductions ====================

// Full reductions produce shape [1]. Axis reductions keep the reduced axis
// with extent 1 so results broadcast back against the input.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto pa = a.node();
  return detail::make_result({1}, {s}, {a}, [pa](const TensorNode& self) {
    if (!pa->requires_grad) return;
    detail::ensure_grad(*pa);
    for (double& g : pa->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  double inv = 1.0 / static_cast<double>(a.size());
  auto pa = a.node();
  return detail::make_result({1}, {s * inv}, {a},
                             [pa, inv](const TensorNode& self) {
                               if (!pa->requires_grad) return;
                               detail::ensure_grad(*pa);
                               for (double& g : pa->grad) g += self.grad[0] * inv;
                             });
}

// Population variance (divides by n, not n-1).
inline Tensor var(const Tensor& a) {
  if (a.size() == 0) throw ContractError("var of an empty tensor");
  double n = static_cast<double>(a.size());
  double mu = 0.0;
  for (double v : a.data()) mu += v;
  mu /= n;
  double s = 0.0;
  for (double v : a.data()) s += (v - mu) * (v - mu);
  auto pa = a.node();
  return detail::make_result(
      {1}, {s / n}, {a}, [pa, mu, n](const TensorNode& self) {
        if (!pa->requires_grad) return;
        detail::ensure_grad(*pa);
        // d/dx_i = 2 (x_i - mu) / n; the dmu term cancels over the sum
        for (std::size_t i = 0; i < pa->data.size(); ++i) {
          pa->grad[i] += self.grad[0] * 2.0 * (pa->data[i] - mu) / n;
        }
      });
}

// Maximum over all entries; gradient flows to the first attaining index.
inline Tensor max(const Tensor& a) {
  if (a.size() == 0) throw ContractError("max of an empty tensor");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a.size(); ++i) {
    if (a.data()[i] > a.data()[arg]) arg = i;
  }
  double v = a.data()[arg];
  auto pa = a.node();
  return detail::make_result({1}, {v}, {a}, [pa, arg](const TensorNode& self) {
    if (!pa->requires_grad) return;
    detail::ensure_grad(*pa);
    pa->grad[arg] += self.grad[0];
  });
}

namespace detail {

enum class Reduce { kSum, kMean, kVar, kMax };

inline void check_axis(const Tensor& a, std::size_t axis, const char* op) {
  if (axis >= a.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(a.shape()));
  }
}

// Flat index of the reduction slot an input element belongs to.
struct AxisMap {
  std::vector<std::size_t> in_shape;
  std::size_t axis;

  std::size_t slot(std::size_t flat) const {
    std::size_t idx = 0;
    std::size_t stride = 1;
    for (std::size_t i = in_shape.size(); i-- > 0;) {
      std::size_t coord = flat % in_shape[i];
      flat /= in_shape[i];
      if (i != axis) {
        idx += coord * stride;
        stride *= in_shape[i];
      } else {
        stride *= 1;
      }
    }
    return idx;
  }
};

inline Tensor reduce_axis(const Tensor& a, std::size_t axis, Reduce op,
                          const char* name) {
  check_axis(a, axis, name);
  auto out_shape = a.shape();
  std::size_t extent = out_shape[axis];
  if (extent == 0) throw ContractError(std::string(name) + " over empty axis");
  out_shape[axis] = 1;
  std::size_t out_n = numel(out_shape);
  AxisMap map{a.shape(), axis};
  const auto& da = a.data();

  std::vector<double> acc(out_n, 0.0);
  std::vector<std::size_t> argmax(op == Reduce::kMax ? out_n : 0, 0);
  std::vector<bool> seen(op == Reduce::kMax ? out_n : 0, false);
  for (std::size_t i = 0; i < da.size(); ++i) {
    std::size_t s = map.slot(i);
    if (op == Reduce::kMax) {
      if (!seen[s] || da[i] > acc[s]) {
        acc[s] = da[i];
        argmax[s] = i;
        seen[s] = true;
      }
    } else {
      acc[s] += da[i];
    }
  }
  double inv = 1.0 / static_cast<double>(extent);
  std::vector<double> out(out_n);
  std::vector<double> means;
  switch (op) {
    case Reduce::kSum:
      out = acc;
      break;
    case Reduce::kMean:
      for (std::size_t s = 0; s < out_n; ++s) out[s] = acc[s] * inv;
      break;
    case Reduce::kVar: {
      means.resize(out_n);
      for (std::size_t s = 0; s < out_n; ++s) means[s] = acc[s] * inv;
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < da.size(); ++i) {
        std::size_t s = map.slot(i);
        double d = da[i] - means[s];
        out[s] += d * d;
      }
      for (std::size_t s = 0; s < out_n; ++s) out[s] *= inv;
      break;
    }
    case Reduce::kMax:
      out = acc;
      break;
  }

  auto pa = a.node();
  return make_result(
      out_shape, std::move(out), {a},
      [pa, map, op, inv, means, argmax](const TensorNode& self) {
        if (!pa->requires_grad) return;
        ensure_grad(*pa);
        switch (op) {
          case Reduce::kSum:
            for (std::size_t i = 0; i < pa->data.size(); ++i) {
              pa->grad[i] += self.grad[map.slot(i)];
            }
            break;
          case Reduce::kMean:
            for (std::size_t i = 0; i < pa->data.size(); ++i) {
              pa->grad[i] += self.grad[map.slot(i)] * inv;
            }
            break;
          case Reduce::kVar:
            for (std::size_t i = 0; i < pa->data.size(); ++i) {
              std::size_t s = map.slot(i);
              pa->grad[i] +=
                  self.grad[s] * 2.0 * (pa->data[i] - means[s]) * inv;
            }
            break;
          case Reduce::kMax:
            for (std::size_t s = 0; s < argmax.size(); ++s) {
              pa->grad[argmax[s]] += self.grad[s];
            }
            break;
        }
      });
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  return detail::reduce_axis(a, axis, detail::Reduce::kSum, "sum_axis");
}
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return detail::reduce_axis(a, axis, detail::Reduce::kMean, "mean_axis");
}
inline Tensor var_axis(const Tensor& a, std::size_t axis) {
  return detail::reduce_axis(a, axis, detail::Reduce::kVar, "var_axis");
}
inline Tensor max_axis(const Tensor& a, std::size_t axis) {
  return detail::reduce_axis(a, axis, detail::Reduce::kMax, "max_axis");
}

// ==================== Structural ops ====================

// Gathers rows by index; duplicates allowed, gradients accumulate.
inline Tensor select_rows(const Tensor& a, std::vector<std::size_t> rows) {
  detail::require_rank2(a, "select_rows");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  for (std::size_t r : rows) {
    if (r >= m) {
      throw ShapeError("select_rows: index " + std::to_string(r) +
                       " out of range for " + std::to_string(m) + " rows");
    }
  }
  std::size_t count = rows.size();
  std::vector<double> out(count * n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < count; ++i) {
    std::copy_n(da.begin() + rows[i] * n, n, out.begin() + i * n);
  }
  auto pa = a.node();
  return detail::make_result(
      {count, n}, std::move(out), {a},
      [pa, rows = std::move(rows), n](const TensorNode& self) {
        if (!pa->requires_grad) return;
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            pa->grad[rows[i] * n + j] += self.grad[i * n + j];
          }
        }
      });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of zero tensors");
  std::size_t n = 0, m = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require_rank2(parts[i], "concat_rows");
    if (i == 0) {
      n = parts[i].shape()[1];
    } else if (parts[i].shape()[1] != n) {
      throw ShapeError("concat_rows: column counts differ, " +
                       std::to_string(n) + " vs " +
                       std::to_string(parts[i].shape()[1]));
    }
    m += parts[i].shape()[0];
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& t : parts) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<std::size_t> row_counts;
  for (const Tensor& t : parts) {
    nodes.push_back(t.node());
    row_counts.push_back(t.shape()[0]);
  }
  return detail::make_result(
      {m, n}, std::move(out), parts,
      [nodes = std::move(nodes), row_counts = std::move(row_counts),
       n](const TensorNode& self) {
        std::size_t row0 = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
          if (nodes[p]->requires_grad) {
            detail::ensure_grad(*nodes[p]);
            for (std::size_t i = 0; i < row_counts[p] * n; ++i) {
              nodes[p]->grad[i] += self.grad[row0 * n + i];
            }
          }
          row0 += row_counts[p];
        }
      });
}

// Columns [lo, hi).
inline Tensor slice_cols(const Tensor& a, std::size_t lo, std::size_t hi) {
  detail::require_rank2(a, "slice_cols");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  if (lo >= hi || hi > n) {
    throw ShapeError("slice_cols: range [" + std::to_string(lo) + ", " +
                     std::to_string(hi) + ") invalid for " + std::to_string(n) +
                     " columns");
  }
  std::size_t w = hi - lo;
  std::vector<double> out(m * w);
  const auto& da = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(da.begin() + i * n + lo, w, out.begin() + i * w);
  }
  auto pa = a.node();
  return detail::make_result({m, w}, std::move(out), {a},
                             [pa, lo, n, w, m](const TensorNode& self) {
                               if (!pa->requires_grad) return;
                               detail::ensure_grad(*pa);
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < w; ++j) {
                                   pa->grad[i * n + lo + j] +=
                                       self.grad[i * w + j];
                                 }
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero tensors");
  std::size_t m = 0, n = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require_rank2(parts[i], "concat_cols");
    if (i == 0) {
      m = parts[i].shape()[0];
    } else if (parts[i].shape()[0] != m) {
      throw ShapeError("concat_cols: row counts differ, " + std::to_string(m) +
                       " vs " + std::to_string(parts[i].shape()[0]));
    }
    n += parts[i].shape()[1];
  }
  std::vector<double> out(m * n);
  std::size_t col0 = 0;
  for (const Tensor& t : parts) {
    std::size_t w = t.shape()[1];
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(t.data().begin() + i * w, w, out.begin() + i * n + col0);
    }
    col0 += w;
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<std::size_t> widths;
  for (const Tensor& t : parts) {
    nodes.push_back(t.node());
    widths.push_back(t.shape()[1]);
  }
  return detail::make_result(
      {m, n}, std::move(out), parts,
      [nodes = std::move(nodes), widths = std::move(widths), m,
       n](const TensorNode& self) {
        std::size_t col0 = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
          std::size_t w = widths[p];
          if (nodes[p]->requires_grad) {
            detail::ensure_grad(*nodes[p]);
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < w; ++j) {
                nodes[p]->grad[i * w + j] += self.grad[i * n + col0 + j];
              }
            }
          }
          col0 += w;
        }
      });
}

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (detail::numel(shape) != a.size()) {
    throw ShapeError("reshape: " + detail::shape_str(a.shape()) + " to " +
                     detail::shape_str(shape) + " changes element count");
  }
  auto pa = a.node();
  return detail::make_result(std::move(shape), a.data(), {a},
                             [pa](const TensorNode& self) {
                               if (!pa->requires_grad) return;
                               detail::ensure_grad(*pa);
                               for (std::size_t i = 0; i < self.data.size(); ++i) {
                                 pa->grad[i] += self.grad[i];
                               }
                             });
}

// ==================== Fused losses ====================

// Mean over rows of -log softmax(logits)[label], computed via logsumexp.
inline Tensor cross_entropy_mean(const Tensor& logits,
                                 const std::vector<int>& labels) {
  detail::require_rank2(logits, "cross_entropy_mean");
  std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) {
    throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy_mean: label " + std::to_string(y) +
                          " out of range for " + std::to_string(c) + " classes");
    }
  }
  const auto& d = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = d[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, d[i * c + j]);
    double lse = 0.0;
    for (std::size_t j = 0; j < c; ++j) lse += std::exp(d[i * c + j] - mx);
    lse = mx + std::log(lse);
    total += lse - d[i * c + labels[i]];
  }
  auto pl = logits.node();
  return detail::make_result(
      {1}, {total / static_cast<double>(b)}, {logits},
      [pl, labels, b, c](const TensorNode& self) {
        if (!pl->requires_grad) return;
        detail::ensure_grad(*pl);
        double g = self.grad[0] / static_cast<double>(b);
        // d/dlogits = (softmax - onehot) / batch
        for (std::size_t i = 0; i < b; ++i) {
          double mx = pl->data[i * c];
          for (std::size_t j = 1; j < c; ++j) {
            mx = std::max(mx, pl->data[i * c + j]);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            sum += std::exp(pl->data[i * c + j] - mx);
          }
          for (std::size_t j = 0; j < c; ++j) {
            double s = std::exp(pl->data[i * c + j] - mx) / sum;
            double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
            pl->grad[i * c + j] += g * (s - onehot);
          }
        }
      });
}

// ==================== Backward ====================

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls; interior gradients are reset per call, so re-running backward on the
// same graph doubles exactly the leaf gradients.
inline void backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward requires a single-element root, got shape " +
                        detail::shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw ContractError("backward on a tensor that does not require grad");
  }

  std::vector<TensorNode*> topo;  // parents before children
  {
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode* p = node->parents[next++].get();
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
  }

  for (TensorNode* n : topo) {
    if (!n->is_leaf() && n->requires_grad) n->grad.assign(n->data.size(), 0.0);
  }
  detail::ensure_grad(*root.node());
  root.node()->grad[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ==================== Gradient checking ====================

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of f's gradient at x. f must map a tensor to a
// scalar tensor deterministically. x's data is perturbed in place and
// restored; its grad is overwritten.
template <class F>
GradCheckResult grad_check(F&& f, Tensor x, double eps = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (y.size() != 1) {
    throw ContractError("grad_check requires a scalar-valued function");
  }
  backward(y);
  std::vector<double> analytic = x.grad();

  GradCheckResult res;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double saved = x.data()[i];
    x.data()[i] = saved + eps;
    double up = f(x).item();
    x.data()[i] = saved - eps;
    double down = f(x).item();
    x.data()[i] = saved;
    double fd = (up - down) / (2.0 * eps);
    double rel =
        std::fabs(fd - analytic[i]) / (std::fabs(fd) + std::fabs(analytic[i]) + 1e-12);
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = fd;
    }
  }
  return res;
}

}  // namespace spectok
