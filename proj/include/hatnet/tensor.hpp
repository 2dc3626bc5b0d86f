#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hatnet/rng.hpp"

namespace hatnet {

// Error taxonomy shared across modules.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Dims = std::vector<std::size_t>;

inline std::string dims_to_string(const Dims& d) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) os << ", ";
    os << d[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t dims_product(const Dims& d) {
  std::size_t p = 1;
  for (std::size_t e : d) p *= e;
  return p;
}

template <typename T>
struct TensorNode;

// A gradient rule reads out.grad and accumulates into out.parents[...]->grad.
template <typename T>
using BackwardFn = std::function<void(const TensorNode<T>&)>;

template <typename T>
struct TensorNode {
  Dims dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  BackwardFn<T> backward_fn;
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Value-semantic handle over a graph node. Ops build a fresh graph every
// forward pass; backward() replays it in reverse topological order.
template <typename T>
class TensorT {
 public:
  using Node = TensorNode<T>;

  TensorT() = default;

  static TensorT from_data(Dims dims, std::vector<T> data, bool requires_grad = false) {
    if (dims_product(dims) != data.size()) {
      throw ShapeError("tensor: dims " + dims_to_string(dims) + " require " +
                       std::to_string(dims_product(dims)) + " values, got " +
                       std::to_string(data.size()));
    }
    auto node = std::make_shared<Node>();
    node->dims = std::move(dims);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return TensorT(std::move(node));
  }

  static TensorT full(Dims dims, T value, bool requires_grad = false) {
    std::vector<T> data(dims_product(dims), value);
    return from_data(std::move(dims), std::move(data), requires_grad);
  }

  static TensorT zeros(Dims dims, bool requires_grad = false) {
    return full(std::move(dims), T(0), requires_grad);
  }

  static TensorT uniform(Dims dims, double lo, double hi, Rng& rng, bool requires_grad = false) {
    std::vector<T> data(dims_product(dims));
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return from_data(std::move(dims), std::move(data), requires_grad);
  }

  // Extension point for ops: records parents and the gradient rule only when
  // some parent requires grad, so constant subgraphs stay leaf-like.
  static TensorT from_op(Dims dims, std::vector<T> data, std::vector<TensorT> parents,
                         BackwardFn<T> backward_fn) {
    TensorT out = from_data(std::move(dims), std::move(data));
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  bool valid() const { return node_ != nullptr; }
  const Dims& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= node_->dims.size())
      throw IndexError("tensor: axis " + std::to_string(axis) + " out of range for rank " +
                       std::to_string(node_->dims.size()));
    return node_->dims[axis];
  }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> values() const { return node_->data; }
  std::span<T> values_mut() { return node_->data; }

  T at(std::size_t i) const {
    if (i >= numel()) throw IndexError("tensor: flat index out of range");
    return node_->data[i];
  }
  T at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("tensor: 2-index access on dims " + dims_to_string(dims()));
    if (i >= dims()[0] || j >= dims()[1]) throw IndexError("tensor: index out of range");
    return node_->data[i * dims()[1] + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool all_finite() const {
    for (T v : node_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Values-only copy, detached from the graph.
  TensorT detached() const {
    return from_data(node_->dims, node_->data, false);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

namespace detail {

// Iterative post-order DFS; parents are visited in stored order, so the
// traversal (and therefore float accumulation order) is deterministic.
template <typename T>
std::vector<std::shared_ptr<TensorNode<T>>> topo_order(const std::shared_ptr<TensorNode<T>>& root) {
  std::vector<std::shared_ptr<TensorNode<T>>> order;
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::size_t>> stack;
  std::unordered_set<const TensorNode<T>*> seen;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (seen.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into every
// reachable tensor with requires_grad; call zero_grad between steps.
template <typename T>
void backward(const TensorT<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got dims " + dims_to_string(loss.dims()));
  if (!loss.requires_grad()) return;
  auto order = detail::topo_order<T>(loss.node());
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
}

// ---------------------------------------------------------------------------
// Ops. Reductions, matmul inner products, and softmax normalizers accumulate
// in double regardless of the storage scalar.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_rank2(const TensorT<T>& x, const char* op) {
  if (x.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got dims " + dims_to_string(x.dims()));
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  const std::size_t p = a.dims()[0], q = a.dims()[1], r = b.dims()[1];
  if (b.dims()[0] != q)
    throw ShapeError("matmul: inner dimensions disagree " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  const auto av = a.values();
  const auto bv = b.values();
  // Contiguous inner loops via a transposed copy of b; k ascends, so the
  // double accumulation order is fixed.
  std::vector<T> bt(q * r);
  for (std::size_t k = 0; k < q; ++k)
    for (std::size_t j = 0; j < r; ++j) bt[j * q + k] = bv[k * r + j];
  std::vector<T> out(p * r);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      double acc = 0.0;
      const T* arow = av.data() + i * q;
      const T* bcol = bt.data() + j * q;
      for (std::size_t k = 0; k < q; ++k) acc += static_cast<double>(arow[k]) * static_cast<double>(bcol[k]);
      out[i * r + j] = static_cast<T>(acc);
    }
  }
  auto grad_rule = [p, q, r](const TensorNode<T>& o) {
    auto& na = *o.parents[0];
    auto& nb = *o.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      // dL/dA = dL/dC @ B^T
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < q; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < r; ++j)
            acc += static_cast<double>(o.grad[i * r + j]) * static_cast<double>(nb.data[k * r + j]);
          na.grad[i * q + k] += static_cast<T>(acc);
        }
      }
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      // dL/dB = A^T @ dL/dC
      for (std::size_t k = 0; k < q; ++k) {
        for (std::size_t j = 0; j < r; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < p; ++i)
            acc += static_cast<double>(na.data[i * q + k]) * static_cast<double>(o.grad[i * r + j]);
          nb.grad[k * r + j] += static_cast<T>(acc);
        }
      }
    }
  };
  return TensorT<T>::from_op({p, r}, std::move(out), {a, b}, grad_rule);
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
  detail::check_rank2(x, "transpose");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[j * p + i] = xv[i * q + j];
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) nx.grad[i * q + j] += o.grad[j * p + i];
  };
  return TensorT<T>::from_op({q, p}, std::move(out), {x}, grad_rule);
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Dims new_dims) {
  if (dims_product(new_dims) != x.numel())
    throw ShapeError("reshape: cannot view dims " + dims_to_string(x.dims()) + " as " +
                     dims_to_string(new_dims));
  std::vector<T> out(x.values().begin(), x.values().end());
  auto grad_rule = [](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
  };
  return TensorT<T>::from_op(std::move(new_dims), std::move(out), {x}, grad_rule);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.dims() != b.dims())
    throw ShapeError("add: dims disagree " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto grad_rule = [](const TensorNode<T>& o) {
    for (int side = 0; side < 2; ++side) {
      auto& n = *o.parents[side];
      if (!n.requires_grad) continue;
      n.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) n.grad[i] += o.grad[i];
    }
  };
  return TensorT<T>::from_op(a.dims(), std::move(out), {a, b}, grad_rule);
}

// x + row broadcast over rows of a rank-2 tensor; row is [q] or [1 x q].
template <typename T>
TensorT<T> add_row(const TensorT<T>& x, const TensorT<T>& row) {
  detail::check_rank2(x, "add_row");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  if (row.numel() != q)
    throw ShapeError("add_row: row dims " + dims_to_string(row.dims()) + " do not match columns of " +
                     dims_to_string(x.dims()));
  const auto xv = x.values();
  const auto rv = row.values();
  std::vector<T> out(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] = xv[i * q + j] + rv[j];
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    auto& nr = *o.parents[1];
    if (nx.requires_grad) {
      nx.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
    }
    if (nr.requires_grad) {
      nr.ensure_grad();
      for (std::size_t j = 0; j < q; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) acc += static_cast<double>(o.grad[i * q + j]);
        nr.grad[j] += static_cast<T>(acc);
      }
    }
  };
  return TensorT<T>::from_op(x.dims(), std::move(out), {x, row}, grad_rule);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.dims() != b.dims())
    throw ShapeError("mul: dims disagree " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto grad_rule = [](const TensorNode<T>& o) {
    auto& na = *o.parents[0];
    auto& nb = *o.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) na.grad[i] += o.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) nb.grad[i] += o.grad[i] * na.data[i];
    }
  };
  return TensorT<T>::from_op(a.dims(), std::move(out), {a, b}, grad_rule);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double c) {
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(xv[i] * c);
  auto grad_rule = [c](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += static_cast<T>(o.grad[i] * c);
  };
  return TensorT<T>::from_op(x.dims(), std::move(out), {x}, grad_rule);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto grad_rule = [](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    // Subgradient at 0 is 0.
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (nx.data[i] > T(0)) nx.grad[i] += o.grad[i];
  };
  return TensorT<T>::from_op(x.dims(), std::move(out), {x}, grad_rule);
}

// Row-wise softmax with max subtraction; exponentials and the normalizer are
// evaluated in double so each stored row sums to 1 within float rounding.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  detail::check_rank2(x, "softmax_rows");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p * q);
  std::vector<double> exps(q);
  for (std::size_t i = 0; i < p; ++i) {
    double mx = static_cast<double>(xv[i * q]);
    for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, static_cast<double>(xv[i * q + j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      exps[j] = std::exp(static_cast<double>(xv[i * q + j]) - mx);
      sum += exps[j];
    }
    for (std::size_t j = 0; j < q; ++j) out[i * q + j] = static_cast<T>(exps[j] / sum);
  }
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    // dx = s * (g - <g, s>) per row
    for (std::size_t i = 0; i < p; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < q; ++j)
        dot += static_cast<double>(o.grad[i * q + j]) * static_cast<double>(o.data[i * q + j]);
      for (std::size_t j = 0; j < q; ++j) {
        const double s = static_cast<double>(o.data[i * q + j]);
        const double g = static_cast<double>(o.grad[i * q + j]);
        nx.grad[i * q + j] += static_cast<T>(s * (g - dot));
      }
    }
  };
  return TensorT<T>::from_op(x.dims(), std::move(out), {x}, grad_rule);
}

// Concatenate rank-2 tensors along columns: [p x q_i] -> [p x sum(q_i)].
template <typename T>
TensorT<T> concat_last_dim(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim: empty part list");
  detail::check_rank2(parts[0], "concat_last_dim");
  const std::size_t p = parts[0].dims()[0];
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::check_rank2(t, "concat_last_dim");
    if (t.dims()[0] != p)
      throw ShapeError("concat_last_dim: row counts disagree " + dims_to_string(parts[0].dims()) +
                       " vs " + dims_to_string(t.dims()));
    total += t.dims()[1];
  }
  std::vector<T> out(p * total);
  std::size_t col = 0;
  for (const auto& t : parts) {
    const std::size_t q = t.dims()[1];
    const auto tv = t.values();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) out[i * total + col + j] = tv[i * q + j];
    col += q;
  }
  auto grad_rule = [p, total](const TensorNode<T>& o) {
    std::size_t col = 0;
    for (const auto& parent : o.parents) {
      const std::size_t q = parent->dims[1];
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) parent->grad[i * q + j] += o.grad[i * total + col + j];
      }
      col += q;
    }
  };
  return TensorT<T>::from_op({p, total}, std::move(out), parts, grad_rule);
}

// Stack rank-2 tensors along rows: [p_i x q] -> [sum(p_i) x q].
template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty part list");
  detail::check_rank2(parts[0], "concat_rows");
  const std::size_t q = parts[0].dims()[1];
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::check_rank2(t, "concat_rows");
    if (t.dims()[1] != q)
      throw ShapeError("concat_rows: column counts disagree " + dims_to_string(parts[0].dims()) +
                       " vs " + dims_to_string(t.dims()));
    total += t.dims()[0];
  }
  std::vector<T> out;
  out.reserve(total * q);
  for (const auto& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
  auto grad_rule = [q](const TensorNode<T>& o) {
    std::size_t offset = 0;
    for (const auto& parent : o.parents) {
      const std::size_t count = parent->dims[0] * q;
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (std::size_t i = 0; i < count; ++i) parent->grad[i] += o.grad[offset + i];
      }
      offset += count;
    }
  };
  return TensorT<T>::from_op({total, q}, std::move(out), parts, grad_rule);
}

// Contiguous row window [row0, row0+rows) of a rank-2 tensor.
template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, std::size_t row0, std::size_t rows) {
  detail::check_rank2(x, "slice_rows");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  if (rows == 0 || row0 + rows > p)
    throw IndexError("slice_rows: window [" + std::to_string(row0) + ", " +
                     std::to_string(row0 + rows) + ") outside " + dims_to_string(x.dims()));
  const auto xv = x.values();
  std::vector<T> out(xv.begin() + static_cast<std::ptrdiff_t>(row0 * q),
                     xv.begin() + static_cast<std::ptrdiff_t>((row0 + rows) * q));
  auto grad_rule = [row0, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[row0 * q + i] += o.grad[i];
  };
  return TensorT<T>::from_op({rows, q}, std::move(out), {x}, grad_rule);
}

// Per-row L2 norm of a rank-2 tensor -> rank-1 [p]. The zero row gets the
// zero subgradient.
template <typename T>
TensorT<T> row_l2_norm(const TensorT<T>& x) {
  detail::check_rank2(x, "row_l2_norm");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p);
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      const double v = static_cast<double>(xv[i * q + j]);
      acc += v * v;
    }
    out[i] = static_cast<T>(std::sqrt(acc));
  }
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < p; ++i) {
      const double norm = static_cast<double>(o.data[i]);
      if (norm == 0.0) continue;
      const double g = static_cast<double>(o.grad[i]) / norm;
      for (std::size_t j = 0; j < q; ++j)
        nx.grad[i * q + j] += static_cast<T>(g * static_cast<double>(nx.data[i * q + j]));
    }
  };
  return TensorT<T>::from_op({p}, std::move(out), {x}, grad_rule);
}

// Per-row L1 norm -> rank-1 [p]; sign(0) taken as 0.
template <typename T>
TensorT<T> row_l1_norm(const TensorT<T>& x) {
  detail::check_rank2(x, "row_l1_norm");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p);
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) acc += std::abs(static_cast<double>(xv[i * q + j]));
    out[i] = static_cast<T>(acc);
  }
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        const T v = nx.data[i * q + j];
        if (v > T(0)) nx.grad[i * q + j] += o.grad[i];
        else if (v < T(0)) nx.grad[i * q + j] -= o.grad[i];
      }
  };
  return TensorT<T>::from_op({p}, std::move(out), {x}, grad_rule);
}

// Per-row arithmetic mean -> rank-1 [p].
template <typename T>
TensorT<T> row_mean(const TensorT<T>& x) {
  detail::check_rank2(x, "row_mean");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p);
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) acc += static_cast<double>(xv[i * q + j]);
    out[i] = static_cast<T>(acc / static_cast<double>(q));
  }
  auto grad_rule = [p, q](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    const double inv = 1.0 / static_cast<double>(q);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j)
        nx.grad[i * q + j] += static_cast<T>(static_cast<double>(o.grad[i]) * inv);
  };
  return TensorT<T>::from_op({p}, std::move(out), {x}, grad_rule);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  auto grad_rule = [](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < nx.grad.size(); ++i) nx.grad[i] += o.grad[0];
  };
  return TensorT<T>::from_op({1}, {static_cast<T>(acc)}, {x}, grad_rule);
}

// Gather out[i] = x[src[i]] with a caller-supplied index map. When src is a
// permutation this is a pure data movement; the gradient scatters back.
template <typename T>
TensorT<T> permute_elements(const TensorT<T>& x, Dims new_dims, std::vector<std::size_t> src) {
  if (dims_product(new_dims) != src.size())
    throw ShapeError("permute_elements: dims " + dims_to_string(new_dims) + " require " +
                     std::to_string(dims_product(new_dims)) + " indices, got " +
                     std::to_string(src.size()));
  const auto xv = x.values();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= xv.size()) throw IndexError("permute_elements: source index out of range");
    out[i] = xv[src[i]];
  }
  auto map = std::make_shared<const std::vector<std::size_t>>(std::move(src));
  auto grad_rule = [map](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i) nx.grad[(*map)[i]] += o.grad[i];
  };
  return TensorT<T>::from_op(std::move(new_dims), std::move(out), {x}, grad_rule);
}

// Non-affine layer norm over each row of a rank-2 tensor.
template <typename T>
TensorT<T> layer_norm_rows(const TensorT<T>& x, double eps = 1e-5) {
  detail::check_rank2(x, "layer_norm_rows");
  const std::size_t p = x.dims()[0], q = x.dims()[1];
  const auto xv = x.values();
  std::vector<T> out(p * q);
  for (std::size_t i = 0; i < p; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < q; ++j) mean += static_cast<double>(xv[i * q + j]);
    mean /= static_cast<double>(q);
    double var = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      const double c = static_cast<double>(xv[i * q + j]) - mean;
      var += c * c;
    }
    var /= static_cast<double>(q);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < q; ++j)
      out[i * q + j] = static_cast<T>((static_cast<double>(xv[i * q + j]) - mean) * inv);
  }
  auto grad_rule = [p, q, eps](const TensorNode<T>& o) {
    auto& nx = *o.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    // dx = inv * (g - mean(g) - y * mean(g*y)) per row, recomputing inv from x.
    for (std::size_t i = 0; i < p; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < q; ++j) mean += static_cast<double>(nx.data[i * q + j]);
      mean /= static_cast<double>(q);
      double var = 0.0;
      for (std::size_t j = 0; j < q; ++j) {
        const double c = static_cast<double>(nx.data[i * q + j]) - mean;
        var += c * c;
      }
      var /= static_cast<double>(q);
      const double inv = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gymean = 0.0;
      for (std::size_t j = 0; j < q; ++j) {
        gmean += static_cast<double>(o.grad[i * q + j]);
        gymean += static_cast<double>(o.grad[i * q + j]) * static_cast<double>(o.data[i * q + j]);
      }
      gmean /= static_cast<double>(q);
      gymean /= static_cast<double>(q);
      for (std::size_t j = 0; j < q; ++j) {
        const double g = static_cast<double>(o.grad[i * q + j]);
        const double y = static_cast<double>(o.data[i * q + j]);
        nx.grad[i * q + j] += static_cast<T>(inv * (g - gmean - y * gymean));
      }
    }
  };
  return TensorT<T>::from_op(x.dims(), std::move(out), {x}, grad_rule);
}

// Negative log-likelihood of a probability vector (numel C) at `label`.
// Precondition: the vector sums to 1 within 1e-5. The picked probability is
// clamped at 1e-12 before the log.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& probs, int label) {
  const std::size_t c = probs.numel();
  if (probs.rank() > 2 || (probs.rank() == 2 && probs.dims()[0] != 1))
    throw ShapeError("cross_entropy: expected a probability vector, got dims " +
                     dims_to_string(probs.dims()));
  if (label < 0 || static_cast<std::size_t>(label) >= c)
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(c) + " classes");
  double sum = 0.0;
  for (T v : probs.values()) sum += static_cast<double>(v);
  if (std::abs(sum - 1.0) > 1e-5)
    throw ContractError("cross_entropy: probabilities sum to " + std::to_string(sum) +
                        ", expected 1 within 1e-5");
  const double picked = std::max(static_cast<double>(probs.values()[label]), 1e-12);
  auto grad_rule = [label, picked](const TensorNode<T>& o) {
    auto& np = *o.parents[0];
    if (!np.requires_grad) return;
    np.ensure_grad();
    np.grad[label] += static_cast<T>(static_cast<double>(o.grad[0]) * (-1.0 / picked));
  };
  return TensorT<T>::from_op({1}, {static_cast<T>(-std::log(picked))}, {probs}, grad_rule);
}

// Fused log-softmax + NLL on raw logits (numel C); backward is softmax(z) - onehot.
template <typename T>
TensorT<T> cross_entropy_logits(const TensorT<T>& logits, int label) {
  const std::size_t c = logits.numel();
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.dims()[0] != 1))
    throw ShapeError("cross_entropy_logits: expected a logit vector, got dims " +
                     dims_to_string(logits.dims()));
  if (label < 0 || static_cast<std::size_t>(label) >= c)
    throw IndexError("cross_entropy_logits: label " + std::to_string(label) +
                     " out of range for " + std::to_string(c) + " classes");
  const auto zv = logits.values();
  double mx = static_cast<double>(zv[0]);
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(zv[j]));
  double sum = 0.0;
  for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(zv[j]) - mx);
  const double loss = std::log(sum) + mx - static_cast<double>(zv[label]);
  auto grad_rule = [label, c](const TensorNode<T>& o) {
    auto& nz = *o.parents[0];
    if (!nz.requires_grad) return;
    nz.ensure_grad();
    double mx = static_cast<double>(nz.data[0]);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(nz.data[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(nz.data[j]) - mx);
    const double g = static_cast<double>(o.grad[0]);
    for (std::size_t j = 0; j < c; ++j) {
      const double s = std::exp(static_cast<double>(nz.data[j]) - mx) / sum;
      nz.grad[j] += static_cast<T>(g * (s - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0)));
    }
  };
  return TensorT<T>::from_op({1}, {static_cast<T>(loss)}, {logits}, grad_rule);
}

// Central finite differences of a scalar-valued functional, perturbing x in
// place. The effective step is measured after storage rounding.
template <typename T, typename F>
TensorT<T> finite_diff_grad(F&& f, TensorT<T>& x, double eps) {
  if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
  auto xv = x.values_mut();
  std::vector<T> g(x.numel());
  auto eval = [&]() -> double {
    TensorT<T> y = f(x);
    if (y.numel() != 1)
      throw ContractError("finite_diff_grad: functional must return a scalar, got dims " +
                          dims_to_string(y.dims()));
    return static_cast<double>(y.values()[0]);
  };
  for (std::size_t i = 0; i < g.size(); ++i) {
    const T orig = xv[i];
    const T hi = static_cast<T>(static_cast<double>(orig) + eps);
    const T lo = static_cast<T>(static_cast<double>(orig) - eps);
    xv[i] = hi;
    const double fp = eval();
    xv[i] = lo;
    const double fm = eval();
    xv[i] = orig;
    const double h = static_cast<double>(hi) - static_cast<double>(lo);
    g[i] = static_cast<T>((fp - fm) / h);
  }
  return TensorT<T>::from_data(x.dims(), std::move(g));
}

}  // namespace hatnet
