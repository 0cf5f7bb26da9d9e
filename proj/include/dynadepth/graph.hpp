// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynadepth/kernels.hpp"
#include "dynadepth/tensor.hpp"

namespace dynadepth {

using NodeId = std::size_t;

enum class Op {
  Input,
  Parameter,
  Constant,
  MatMul,
  Add,
  Sub,
  Multiply,
  Scale,
  LayerNorm,
  Softmax,
  LogSoftmax,
  Gelu,
  Embedding,
  Concat,
  Slice,
  Transpose,
  Sum,
  Mean,
  Log,
  Exp,
  ScaleRows,
  ArgmaxOneHot,
  StraightThrough,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Multiply: return "multiply";
    case Op::Scale: return "scale";
    case Op::LayerNorm: return "layer_norm";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Gelu: return "gelu";
    case Op::Embedding: return "embedding";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Transpose: return "transpose";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::ScaleRows: return "scale_rows";
    case Op::ArgmaxOneHot: return "argmax_onehot";
    case Op::StraightThrough: return "straight_through";
  }
  return "unknown";
}

class NonDifferentiableError : public std::runtime_error {
 public:
  NonDifferentiableError(Op op, NodeId id)
      : std::runtime_error("backpropagate: op '" + std::string(op_name(op)) + "' (node " +
                           std::to_string(id) + ") is not differentiable"),
        op_(op), node_(id) {}
  Op op() const noexcept { return op_; }
  NodeId node() const noexcept { return node_; }

 private:
  Op op_;
  NodeId node_;
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(NodeId id)
      : std::runtime_error("non-finite value at node " + std::to_string(id)), node_(id) {}
  NodeId node() const noexcept { return node_; }

 private:
  NodeId node_;
};

struct Node {
  Op op = Op::Constant;
  std::vector<NodeId> inputs;
  Tensor value;
  std::string name;
  bool requires_grad = false;
  double scalar = 0.0;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
  std::vector<double> aux;
};

/// Reverse-mode differentiation tape.
///
/// Ops are evaluated eagerly as they are recorded, so the graph doubles as a
/// define-by-run tape. The recorded structure can be replayed with rebound
/// leaves through evaluate(), which is what gradient_check relies on.
class Graph {
 public:
  NodeId input(std::string name, Tensor value) {
    Node n;
    n.op = Op::Input;
    n.name = std::move(name);
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId parameter(std::string name, Tensor value) {
    Node n;
    n.op = Op::Parameter;
    n.name = std::move(name);
    n.value = std::move(value);
    n.requires_grad = true;
    n.value.set_requires_grad(true);
    return push(std::move(n));
  }

  NodeId constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) { return record(Op::MatMul, {a, b}); }
  NodeId add(NodeId a, NodeId b) { return record(Op::Add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return record(Op::Sub, {a, b}); }
  NodeId multiply(NodeId a, NodeId b) { return record(Op::Multiply, {a, b}); }

  NodeId scale(NodeId a, double factor) {
    Node n = make(Op::Scale, {a});
    n.scalar = factor;
    return finish(std::move(n));
  }

  /// Normalizes the last dimension (no affine terms).
  NodeId layer_norm(NodeId x, double eps) {
    Node n = make(Op::LayerNorm, {x});
    n.scalar = eps;
    return finish(std::move(n));
  }

  NodeId softmax(NodeId x) { return record(Op::Softmax, {x}); }
  NodeId log_softmax(NodeId x) { return record(Op::LogSoftmax, {x}); }
  NodeId gelu(NodeId x) { return record(Op::Gelu, {x}); }

  NodeId embedding(NodeId table, std::vector<std::size_t> ids) {
    Node n = make(Op::Embedding, {table});
    n.indices = std::move(ids);
    return finish(std::move(n));
  }

  NodeId concat(std::vector<NodeId> parts, std::size_t axis) {
    Node n = make(Op::Concat, std::move(parts));
    n.axis = axis;
    return finish(std::move(n));
  }

  /// Half-open range [begin, end) along axis 0 or 1.
  NodeId slice(NodeId x, std::size_t axis, std::size_t begin, std::size_t end) {
    Node n = make(Op::Slice, {x});
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    return finish(std::move(n));
  }

  NodeId transpose(NodeId x) { return record(Op::Transpose, {x}); }
  NodeId sum(NodeId x) { return record(Op::Sum, {x}); }
  NodeId mean(NodeId x) { return record(Op::Mean, {x}); }
  NodeId log(NodeId x) { return record(Op::Log, {x}); }
  NodeId exp(NodeId x) { return record(Op::Exp, {x}); }

  /// Multiplies row r of x[n x d] by g[r]; g is [n] or [n x 1].
  NodeId scale_rows(NodeId x, NodeId g) { return record(Op::ScaleRows, {x, g}); }

  /// One-hot of the row-wise argmax. Has no derivative.
  NodeId argmax_onehot(NodeId x) { return record(Op::ArgmaxOneHot, {x}); }

  /// Forward: one-hot of the row-wise argmax. Backward: identity into x.
  NodeId straight_through(NodeId x) { return record(Op::StraightThrough, {x}); }

  void mark_output(std::string name, NodeId id) { outputs_[std::move(name)] = id; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }

  /// Rebinds named leaves and replays every non-leaf node in order.
  std::map<std::string, Tensor> evaluate(const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, t] : inputs) {
      const NodeId id = leaf_by_name(name);
      if (t.shape() != nodes_[id].value.shape()) {
        throw ShapeError("evaluate", "input '" + name + "' has shape " + shape_str(t.shape()) +
                                         ", graph expects " + shape_str(nodes_[id].value.shape()));
      }
      const bool rg = nodes_[id].value.requires_grad();
      nodes_[id].value = t;
      nodes_[id].value.set_requires_grad(rg);
    }
    replay();
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out.emplace(name, nodes_[id].value);
    return out;
  }

  /// Recomputes all non-leaf nodes from current leaf values.
  void replay() {
    for (auto& n : nodes_) {
      if (!is_leaf(n.op)) compute(n);
    }
  }

  /// Gradient of a scalar loss with respect to every parameter leaf, keyed by
  /// leaf name. Fan-out contributions accumulate additively.
  std::map<std::string, Tensor> backpropagate(NodeId loss) {
    if (loss >= nodes_.size()) throw std::out_of_range("backpropagate: unknown loss node");
    if (nodes_[loss].value.numel() != 1) {
      throw ShapeError("backpropagate",
                       "loss must be scalar, got " + shape_str(nodes_[loss].value.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grads_[loss].assign(1, 1.0);
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || grads_[id].empty()) continue;
      if (is_leaf(n.op)) continue;
      if (n.op == Op::ArgmaxOneHot) throw NonDifferentiableError(n.op, id);
      backward(id);
    }
    std::map<std::string, Tensor> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.op != Op::Parameter) continue;
      std::vector<double> g = grads_[id].empty() ? std::vector<double>(n.value.numel(), 0.0)
                                                 : grads_[id];
      n.value.set_grad(g);
      out[n.name] = Tensor(n.value.shape(), std::move(g));
    }
    return out;
  }

  /// Gradient buffer of any node after backpropagate (empty if unreached).
  const std::vector<double>& grad(NodeId id) const { return grads_.at(id); }

  NodeId leaf_by_name(const std::string& name) const {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if ((nodes_[id].op == Op::Input || nodes_[id].op == Op::Parameter) &&
          nodes_[id].name == name) {
        return id;
      }
    }
    throw std::invalid_argument("graph has no leaf named '" + name + "'");
  }

  /// Direct access for perturbation-based checks; caller must replay().
  Tensor& mutable_leaf(NodeId id) {
    if (!is_leaf(nodes_.at(id).op)) throw std::invalid_argument("node is not a leaf");
    return nodes_[id].value;
  }

  static bool is_leaf(Op op) { return op == Op::Input || op == Op::Parameter || op == Op::Constant; }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::map<std::string, NodeId> outputs_;

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  Node make(Op op, std::vector<NodeId> inputs) const {
    Node n;
    n.op = op;
    for (NodeId i : inputs) {
      if (i >= nodes_.size()) throw std::out_of_range(std::string(op_name(op)) + ": unknown input node");
      n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    }
    n.inputs = std::move(inputs);
    return n;
  }

  NodeId finish(Node n) {
    compute(n);
    return push(std::move(n));
  }

  NodeId record(Op op, std::vector<NodeId> inputs) { return finish(make(op, std::move(inputs))); }

  const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].value; }

  std::vector<double>& grad_buf(NodeId id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
    return g;
  }

  [[noreturn]] static void shape_fail(Op op, const std::string& detail) {
    throw ShapeError(std::string(op_name(op)), detail);
  }

  // Same shape, or b is a vector matching the trailing dimension of a.
  static bool broadcast_ok(const Tensor& a, const Tensor& b, bool& rowwise) {
    if (a.shape() == b.shape()) {
      rowwise = false;
      return true;
    }
    rowwise = b.rank() == 1 && a.rank() >= 1 && b.numel() == a.last_dim();
    return rowwise;
  }

  static void require_rank2(Op op, const Tensor& t) {
    if (t.rank() != 2) shape_fail(op, "expected a matrix, got " + shape_str(t.shape()));
  }

  void compute(Node& n) {
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::Constant:
        return;
      case Op::MatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
          shape_fail(n.op, shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        Tensor c(Shape{a.dim(0), b.dim(1)});
        kernels::matmul(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
        n.value = std::move(c);
        return;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Multiply: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        bool rowwise = false;
        if (!broadcast_ok(a, b, rowwise)) {
          shape_fail(n.op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
        Tensor c(a.shape());
        const std::size_t d = b.numel();
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double bv = rowwise ? b[i % d] : b[i];
          c[i] = n.op == Op::Add ? a[i] + bv : n.op == Op::Sub ? a[i] - bv : a[i] * bv;
        }
        n.value = std::move(c);
        return;
      }
      case Op::Scale: {
        Tensor c = in(n, 0);
        c.set_requires_grad(false);
        c.clear_grad();
        for (double& v : c.data()) v *= n.scalar;
        n.value = std::move(c);
        return;
      }
      case Op::LayerNorm: {
        const Tensor& x = in(n, 0);
        if (x.rank() == 0) shape_fail(n.op, "cannot normalize a scalar");
        Tensor y(x.shape());
        n.aux.assign(x.outer(), 0.0);
        kernels::layer_norm_rows(x.data(), y.data(), n.aux, x.outer(), x.last_dim(), n.scalar);
        n.value = std::move(y);
        return;
      }
      case Op::Softmax:
      case Op::LogSoftmax: {
        const Tensor& x = in(n, 0);
        if (x.rank() == 0) shape_fail(n.op, "needs at least one dimension");
        Tensor y(x.shape());
        if (n.op == Op::Softmax) {
          kernels::softmax_rows(x.data(), y.data(), x.outer(), x.last_dim());
        } else {
          kernels::log_softmax_rows(x.data(), y.data(), x.outer(), x.last_dim());
        }
        n.value = std::move(y);
        return;
      }
      case Op::Gelu:
      case Op::Log:
      case Op::Exp: {
        const Tensor& x = in(n, 0);
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
          y[i] = n.op == Op::Gelu ? kernels::gelu(x[i])
                 : n.op == Op::Log ? std::log(x[i])
                                   : std::exp(x[i]);
        }
        n.value = std::move(y);
        return;
      }
      case Op::Embedding: {
        const Tensor& table = in(n, 0);
        require_rank2(n.op, table);
        const std::size_t d = table.dim(1);
        Tensor y(Shape{n.indices.size(), d});
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          if (n.indices[r] >= table.dim(0)) {
            shape_fail(n.op, "index " + std::to_string(n.indices[r]) + " out of range for table " +
                                 shape_str(table.shape()));
          }
          std::copy_n(table.raw() + n.indices[r] * d, d, y.raw() + r * d);
        }
        n.value = std::move(y);
        return;
      }
      case Op::Concat: {
        if (n.inputs.empty()) shape_fail(n.op, "no inputs");
        const Tensor& first = in(n, 0);
        if (n.axis == 0) {
          Shape shape = first.shape();
          if (shape.empty()) shape_fail(n.op, "cannot concatenate scalars");
          std::size_t rows = 0;
          std::vector<double> data;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const Tensor& t = in(n, k);
            if (t.rank() != first.rank() ||
                !std::equal(t.shape().begin() + 1, t.shape().end(), first.shape().begin() + 1)) {
              shape_fail(n.op, "axis 0: " + shape_str(first.shape()) + " vs " + shape_str(t.shape()));
            }
            rows += t.dim(0);
            data.insert(data.end(), t.data().begin(), t.data().end());
          }
          shape[0] = rows;
          n.value = Tensor(std::move(shape), std::move(data));
        } else if (n.axis == 1) {
          require_rank2(n.op, first);
          const std::size_t rows = first.dim(0);
          std::size_t cols = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const Tensor& t = in(n, k);
            require_rank2(n.op, t);
            if (t.dim(0) != rows) {
              shape_fail(n.op, "axis 1: " + shape_str(first.shape()) + " vs " + shape_str(t.shape()));
            }
            cols += t.dim(1);
          }
          Tensor y(Shape{rows, cols});
          std::size_t off = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const Tensor& t = in(n, k);
            for (std::size_t r = 0; r < rows; ++r) {
              std::copy_n(t.raw() + r * t.dim(1), t.dim(1), y.raw() + r * cols + off);
            }
            off += t.dim(1);
          }
          n.value = std::move(y);
        } else {
          shape_fail(n.op, "axis must be 0 or 1");
        }
        return;
      }
      case Op::Slice: {
        const Tensor& x = in(n, 0);
        if (x.rank() == 0 || n.axis >= x.rank() || n.axis > 1 || n.begin > n.end ||
            n.end > x.dim(n.axis)) {
          shape_fail(n.op, "range [" + std::to_string(n.begin) + "," + std::to_string(n.end) +
                               ") on axis " + std::to_string(n.axis) + " of " + shape_str(x.shape()));
        }
        Shape shape = x.shape();
        shape[n.axis] = n.end - n.begin;
        if (n.axis == 0) {
          const std::size_t stride = x.numel() / x.dim(0);
          std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(n.begin * stride),
                                   x.data().begin() + static_cast<std::ptrdiff_t>(n.end * stride));
          n.value = Tensor(std::move(shape), std::move(data));
        } else {
          require_rank2(n.op, x);
          Tensor y(shape);
          const std::size_t w = n.end - n.begin;
          for (std::size_t r = 0; r < x.dim(0); ++r) {
            std::copy_n(x.raw() + r * x.dim(1) + n.begin, w, y.raw() + r * w);
          }
          n.value = std::move(y);
        }
        return;
      }
      case Op::Transpose: {
        const Tensor& x = in(n, 0);
        require_rank2(n.op, x);
        Tensor y(Shape{x.dim(1), x.dim(0)});
        for (std::size_t r = 0; r < x.dim(0); ++r) {
          for (std::size_t c = 0; c < x.dim(1); ++c) y.at(c, r) = x.at(r, c);
        }
        n.value = std::move(y);
        return;
      }
      case Op::Sum:
      case Op::Mean: {
        const Tensor& x = in(n, 0);
        double s = 0.0;
        for (double v : x.data()) s += v;
        if (n.op == Op::Mean) s /= static_cast<double>(x.numel());
        n.value = Tensor::scalar(s);
        return;
      }
      case Op::ScaleRows: {
        const Tensor& x = in(n, 0);
        const Tensor& g = in(n, 1);
        require_rank2(n.op, x);
        const bool ok = (g.rank() == 1 && g.dim(0) == x.dim(0)) ||
                        (g.rank() == 2 && g.dim(0) == x.dim(0) && g.dim(1) == 1);
        if (!ok) shape_fail(n.op, shape_str(x.shape()) + " by " + shape_str(g.shape()));
        Tensor y(x.shape());
        const std::size_t d = x.dim(1);
        for (std::size_t r = 0; r < x.dim(0); ++r) {
          for (std::size_t c = 0; c < d; ++c) y[r * d + c] = x[r * d + c] * g[r];
        }
        n.value = std::move(y);
        return;
      }
      case Op::ArgmaxOneHot:
      case Op::StraightThrough: {
        const Tensor& x = in(n, 0);
        if (x.rank() == 0) shape_fail(n.op, "needs at least one dimension");
        Tensor y(x.shape());
        const std::size_t d = x.last_dim();
        for (std::size_t r = 0; r < x.outer(); ++r) {
          const std::size_t k = kernels::argmax(std::span<const double>(x.raw() + r * d, d));
          y[r * d + k] = 1.0;
        }
        n.value = std::move(y);
        return;
      }
    }
  }

  void accumulate(NodeId target, std::span<const double> g) {
    if (!nodes_[target].requires_grad) return;
    auto& buf = grad_buf(target);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  void backward(NodeId id) {
    const Node& n = nodes_[id];
    const std::vector<double>& dy = grads_[id];
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
      case Op::Constant:
      case Op::ArgmaxOneHot:
        return;
      case Op::MatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
        if (nodes_[n.inputs[0]].requires_grad) {
          auto& ga = grad_buf(n.inputs[0]);
          kernels::matmul_add_bt(dy, b.data(), ga, m, p, k);
        }
        if (nodes_[n.inputs[1]].requires_grad) {
          auto& gb = grad_buf(n.inputs[1]);
          kernels::matmul_add_at(a.data(), dy, gb, m, k, p);
        }
        return;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Multiply: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const bool rowwise = a.shape() != b.shape();
        const std::size_t d = b.numel();
        if (nodes_[n.inputs[0]].requires_grad) {
          auto& ga = grad_buf(n.inputs[0]);
          for (std::size_t i = 0; i < a.numel(); ++i) {
            const double bv = rowwise ? b[i % d] : b[i];
            ga[i] += n.op == Op::Multiply ? dy[i] * bv : dy[i];
          }
        }
        if (nodes_[n.inputs[1]].requires_grad) {
          auto& gb = grad_buf(n.inputs[1]);
          for (std::size_t i = 0; i < a.numel(); ++i) {
            const std::size_t j = rowwise ? i % d : i;
            gb[j] += n.op == Op::Add ? dy[i] : n.op == Op::Sub ? -dy[i] : dy[i] * a[i];
          }
        }
        return;
      }
      case Op::Scale: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * n.scalar;
        return;
      }
      case Op::LayerNorm: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& y = n.value;
        const std::size_t d = y.last_dim();
        for (std::size_t r = 0; r < y.outer(); ++r) {
          double mdy = 0.0, mdyy = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            mdy += dy[r * d + i];
            mdyy += dy[r * d + i] * y[r * d + i];
          }
          mdy /= static_cast<double>(d);
          mdyy /= static_cast<double>(d);
          for (std::size_t i = 0; i < d; ++i) {
            g[r * d + i] += n.aux[r] * (dy[r * d + i] - mdy - y[r * d + i] * mdyy);
          }
        }
        return;
      }
      case Op::Softmax: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& y = n.value;
        const std::size_t d = y.last_dim();
        for (std::size_t r = 0; r < y.outer(); ++r) {
          double dot = 0.0;
          for (std::size_t i = 0; i < d; ++i) dot += dy[r * d + i] * y[r * d + i];
          for (std::size_t i = 0; i < d; ++i) g[r * d + i] += y[r * d + i] * (dy[r * d + i] - dot);
        }
        return;
      }
      case Op::LogSoftmax: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& y = n.value;
        const std::size_t d = y.last_dim();
        for (std::size_t r = 0; r < y.outer(); ++r) {
          double total = 0.0;
          for (std::size_t i = 0; i < d; ++i) total += dy[r * d + i];
          for (std::size_t i = 0; i < d; ++i) {
            g[r * d + i] += dy[r * d + i] - std::exp(y[r * d + i]) * total;
          }
        }
        return;
      }
      case Op::Gelu:
      case Op::Log:
      case Op::Exp: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& x = in(n, 0);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          const double local = n.op == Op::Gelu ? kernels::gelu_grad(x[i])
                               : n.op == Op::Log ? 1.0 / x[i]
                                                 : n.value[i];
          g[i] += dy[i] * local;
        }
        return;
      }
      case Op::Embedding: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const std::size_t d = n.value.last_dim();
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          for (std::size_t c = 0; c < d; ++c) g[n.indices[r] * d + c] += dy[r * d + c];
        }
        return;
      }
      case Op::Concat: {
        if (n.axis == 0) {
          std::size_t off = 0;
          for (NodeId src : n.inputs) {
            const std::size_t cnt = nodes_[src].value.numel();
            accumulate(src, std::span<const double>(dy.data() + off, cnt));
            off += cnt;
          }
        } else {
          const std::size_t rows = n.value.dim(0), cols = n.value.dim(1);
          std::size_t off = 0;
          for (NodeId src : n.inputs) {
            const std::size_t w = nodes_[src].value.dim(1);
            if (nodes_[src].requires_grad) {
              auto& g = grad_buf(src);
              for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < w; ++c) g[r * w + c] += dy[r * cols + off + c];
              }
            }
            off += w;
          }
        }
        return;
      }
      case Op::Slice: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& x = in(n, 0);
        if (n.axis == 0) {
          const std::size_t stride = x.numel() / x.dim(0);
          for (std::size_t i = 0; i < dy.size(); ++i) g[n.begin * stride + i] += dy[i];
        } else {
          const std::size_t w = n.end - n.begin;
          for (std::size_t r = 0; r < x.dim(0); ++r) {
            for (std::size_t c = 0; c < w; ++c) g[r * x.dim(1) + n.begin + c] += dy[r * w + c];
          }
        }
        return;
      }
      case Op::Transpose: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const Tensor& x = in(n, 0);
        for (std::size_t r = 0; r < x.dim(0); ++r) {
          for (std::size_t c = 0; c < x.dim(1); ++c) g[r * x.dim(1) + c] += dy[c * x.dim(0) + r];
        }
        return;
      }
      case Op::Sum:
      case Op::Mean: {
        if (!nodes_[n.inputs[0]].requires_grad) return;
        auto& g = grad_buf(n.inputs[0]);
        const double v = n.op == Op::Mean ? dy[0] / static_cast<double>(g.size()) : dy[0];
        for (double& gi : g) gi += v;
        return;
      }
      case Op::ScaleRows: {
        const Tensor& x = in(n, 0);
        const Tensor& s = in(n, 1);
        const std::size_t d = x.dim(1);
        if (nodes_[n.inputs[0]].requires_grad) {
          auto& g = grad_buf(n.inputs[0]);
          for (std::size_t r = 0; r < x.dim(0); ++r) {
            for (std::size_t c = 0; c < d; ++c) g[r * d + c] += dy[r * d + c] * s[r];
          }
        }
        if (nodes_[n.inputs[1]].requires_grad) {
          auto& g = grad_buf(n.inputs[1]);
          for (std::size_t r = 0; r < x.dim(0); ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += dy[r * d + c] * x[r * d + c];
            g[r] += acc;
          }
        }
        return;
      }
      case Op::StraightThrough:
        accumulate(n.inputs[0], dy);
        return;
    }
  }
};

struct LeafCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& l : leaves) w = std::max(w, l.max_rel_error);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-6;
  /// Upper bound on perturbed elements per leaf (evenly strided); 0 = all.
  std::size_t max_per_leaf = 0;
};

namespace detail {
// Masked attention scores are -inf by design, so only leaves and the loss are checked.
inline void require_finite(const Graph& g, NodeId loss) {
  for (NodeId id = 0; id < g.size(); ++id) {
    const Op op = g.node(id).op;
    if (id != loss && op != Op::Parameter && op != Op::Input) continue;
    for (double v : g.value(id).data()) {
      if (!std::isfinite(v)) throw NonFiniteError(id);
    }
  }
}
}  // namespace detail

/// Compares backpropagated gradients of every parameter leaf against central
/// finite differences. Relative error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport gradient_check(Graph& graph, NodeId loss, double tolerance,
                                      GradCheckOptions opts = {}) {
  detail::require_finite(graph, loss);
  const auto analytic = graph.backpropagate(loss);
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& [name, grad] : analytic) {
    const NodeId leaf = graph.leaf_by_name(name);
    Tensor& value = graph.mutable_leaf(leaf);
    LeafCheck check{name, 0.0, 0};
    const std::size_t n = value.numel();
    const std::size_t stride =
        opts.max_per_leaf == 0 || n <= opts.max_per_leaf ? 1 : (n + opts.max_per_leaf - 1) / opts.max_per_leaf;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = value[i];
      value[i] = orig + opts.step;
      graph.replay();
      const double up = graph.value(loss).item();
      value[i] = orig - opts.step;
      graph.replay();
      const double down = graph.value(loss).item();
      value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError(loss);
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = grad[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      check.max_rel_error = std::max(check.max_rel_error, std::abs(a - numeric) / denom);
      ++check.checked;
    }
    report.leaves.push_back(std::move(check));
  }
  graph.replay();
  return report;
}

}  // namespace dynadepth
