#pragma once

// Reverse-mode automatic differentiation over dense f64 matrices.
//
// A Tape records a static graph: leaves (inputs and parameters) and operations
// built from earlier nodes. Node ids are creation order, which is therefore a
// topological order. Leaves can be rebound to new values between evaluations,
// so one graph serves every minibatch of a training run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cnx/errors.hpp"
#include "cnx/matrix.hpp"

namespace cnx::ad {

enum class Op {
  Input,
  Parameter,
  MatMul,
  Add,  // broadcasting
  Relu,
  Sigmoid,
  Abs,
  Mul,  // broadcasting
  Div,  // broadcasting; x / 0 := 0
  ReduceSum,
  Log,
  ScalarMul,
  ClampMin,
  BceLogits,  // mean binary cross-entropy of sigmoid(logits) against targets
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Abs: return "abs";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::ReduceSum: return "reduce_sum";
    case Op::Log: return "log";
    case Op::ScalarMul: return "scalar_mul";
    case Op::ClampMin: return "clamp_min";
    case Op::BceLogits: return "bce_logits";
  }
  return "?";
}

/// Handle to a tape node.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  friend bool operator==(Var, Var) = default;
};

struct Node {
  Op op = Op::Input;
  std::size_t lhs = static_cast<std::size_t>(-1);
  std::size_t rhs = static_cast<std::size_t>(-1);
  double scalar = 0.0;
  std::string label;
  Matrix value;
  Matrix grad;
};

/// Gradients keyed by parameter leaf.
class GradientMap {
 public:
  const Matrix& operator[](Var v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw StateError("no gradient recorded for node " + std::to_string(v.id));
    return it->second;
  }
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  std::size_t size() const { return grads_.size(); }
  void set(Var v, Matrix g) { grads_[v.id] = std::move(g); }

 private:
  std::unordered_map<std::size_t, Matrix> grads_;
};

namespace detail {

inline std::size_t broadcast_dim(std::size_t a, std::size_t b, bool& ok) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  ok = false;
  return 0;
}

inline void reshape(Matrix& m, std::size_t rows, std::size_t cols) {
  if (m.rows() != rows || m.cols() != cols) m = Matrix(rows, cols);
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

}  // namespace detail

class Tape {
 public:
  Var input(Matrix value, std::string label = {}) { return leaf(Op::Input, std::move(value), std::move(label)); }
  Var parameter(Matrix value, std::string label = {}) {
    Var v = leaf(Op::Parameter, std::move(value), std::move(label));
    params_.push_back(v.id);
    return v;
  }

  /// Rebinds a leaf; invalidates any previous forward pass.
  void bind(Var leaf, Matrix value) {
    Node& n = node(leaf);
    if (n.op != Op::Input && n.op != Op::Parameter)
      throw StateError("bind: node " + describe(leaf.id) + " is not a leaf");
    n.value = std::move(value);
    forwarded_ = false;
  }

  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::Div, a, b); }
  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
  Var relu(Var a) { return unary(Op::Relu, a); }
  Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
  Var abs(Var a) { return unary(Op::Abs, a); }
  Var sum(Var a) { return unary(Op::ReduceSum, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var scale(Var a, double c) { return unary(Op::ScalarMul, a, c); }
  Var clamp_min(Var a, double lo) { return unary(Op::ClampMin, a, lo); }
  Var bce_with_logits(Var logits, Var targets) { return binary(Op::BceLogits, logits, targets); }

  std::size_t node_count() const noexcept { return nodes_.size(); }
  const Node& at(Var v) const { return nodes_.at(v.id); }
  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool forwarded() const noexcept { return forwarded_; }

  /// Evaluates every node up to `exit`; `exit` must come out 1x1.
  double forward(Var exit) {
    check(exit);
    for (std::size_t i = 0; i <= exit.id; ++i) evaluate(i);
    const Matrix& out = nodes_[exit.id].value;
    if (out.rows() != 1 || out.cols() != 1)
      throw DimensionError("forward: exit node " + describe(exit.id) + " is " + out.shape_str() + ", expected 1x1");
    exit_ = exit.id;
    forwarded_ = true;
    return out[0];
  }

  /// Gradient of the last forward exit with respect to every parameter leaf.
  GradientMap backward() {
    if (!forwarded_) throw StateError("backward called before forward (or after a leaf was rebound)");
    for (std::size_t i = 0; i <= exit_; ++i) {
      Node& n = nodes_[i];
      detail::reshape(n.grad, n.value.rows(), n.value.cols());
      n.grad.fill(0.0);
    }
    nodes_[exit_].grad[0] = 1.0;
    for (std::size_t i = exit_ + 1; i-- > 0;) propagate(i);

    GradientMap out;
    for (std::size_t id : params_)
      if (id <= exit_) out.set(Var{id}, nodes_[id].grad);
      else out.set(Var{id}, Matrix(nodes_[id].value.rows(), nodes_[id].value.cols()));
    return out;
  }

 private:
  Node& node(Var v) {
    check(v);
    return nodes_[v.id];
  }

  void check(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("unknown tape node " + std::to_string(v.id));
  }

  std::string describe(std::size_t id) const {
    const Node& n = nodes_[id];
    std::string s = std::string(op_name(n.op)) + "#" + std::to_string(id);
    if (!n.label.empty()) s += "(" + n.label + ")";
    return s;
  }

  Var leaf(Op op, Matrix value, std::string label) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return Var{nodes_.size() - 1};
  }

  Var unary(Op op, Var a, double scalar = 0.0) {
    check(a);
    Node n;
    n.op = op;
    n.lhs = a.id;
    n.scalar = scalar;
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return Var{nodes_.size() - 1};
  }

  Var binary(Op op, Var a, Var b) {
    check(a);
    check(b);
    Node n;
    n.op = op;
    n.lhs = a.id;
    n.rhs = b.id;
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return Var{nodes_.size() - 1};
  }

  void broadcast_shape(std::size_t id, std::size_t& rows, std::size_t& cols) const {
    const Node& n = nodes_[id];
    const Matrix& a = nodes_[n.lhs].value;
    const Matrix& b = nodes_[n.rhs].value;
    bool ok = true;
    rows = detail::broadcast_dim(a.rows(), b.rows(), ok);
    cols = detail::broadcast_dim(a.cols(), b.cols(), ok);
    if (!ok)
      throw DimensionError(std::string(op_name(n.op)) + ": cannot broadcast " + describe(n.lhs) + " [" +
                           a.shape_str() + "] with " + describe(n.rhs) + " [" + b.shape_str() + "]");
  }

  void evaluate(std::size_t id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
        return;
      case Op::MatMul: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        if (a.cols() != b.rows())
          throw DimensionError("matmul: " + describe(n.lhs) + " [" + a.shape_str() + "] * " + describe(n.rhs) +
                               " [" + b.shape_str() + "]");
        detail::reshape(n.value, a.rows(), b.cols());
        n.value.fill(0.0);
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) n.value(i, j) += aik * b(k, j);
          }
        return;
      }
      case Op::Add:
      case Op::Mul:
      case Op::Div:
      case Op::BceLogits: {
        std::size_t rows = 0, cols = 0;
        broadcast_shape(id, rows, cols);
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        if (n.op == Op::BceLogits) {
          if (!a.same_shape(b))
            throw DimensionError("bce_logits: " + describe(n.lhs) + " [" + a.shape_str() + "] vs " +
                                 describe(n.rhs) + " [" + b.shape_str() + "]");
          double total = 0.0;
          for (std::size_t i = 0; i < a.size(); ++i) total += detail::softplus(a[i]) - b[i] * a[i];
          detail::reshape(n.value, 1, 1);
          n.value[0] = a.size() ? total / static_cast<double>(a.size()) : 0.0;
          return;
        }
        detail::reshape(n.value, rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const double x = a(a.rows() == 1 ? 0 : r, a.cols() == 1 ? 0 : c);
            const double y = b(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c);
            double v;
            if (n.op == Op::Add) v = x + y;
            else if (n.op == Op::Mul) v = x * y;
            else v = (y == 0.0) ? 0.0 : x / y;
            n.value(r, c) = v;
          }
        return;
      }
      case Op::ReduceSum: {
        const Matrix& a = nodes_[n.lhs].value;
        detail::reshape(n.value, 1, 1);
        n.value[0] = a.sum();
        return;
      }
      default: {
        const Matrix& a = nodes_[n.lhs].value;
        detail::reshape(n.value, a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double x = a[i];
          double v = 0.0;
          switch (n.op) {
            case Op::Relu: v = x > 0 ? x : 0.0; break;
            case Op::Sigmoid: v = detail::sigmoid(x); break;
            case Op::Abs: v = std::abs(x); break;
            case Op::Log: v = std::log(x); break;
            case Op::ScalarMul: v = n.scalar * x; break;
            case Op::ClampMin: v = x > n.scalar ? x : n.scalar; break;
            default: break;
          }
          n.value[i] = v;
        }
        return;
      }
    }
  }

  void propagate(std::size_t id) {
    Node& n = nodes_[id];
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::Input:
      case Op::Parameter:
        return;
      case Op::MatMul: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        // Copies guard against lhs == rhs aliasing of the grad buffers.
        Matrix ga(a.rows(), a.cols());
        Matrix gb(b.rows(), b.cols());
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t k = 0; k < a.cols(); ++k) {
            double acc = 0.0;
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
              acc += g(i, j) * b(k, j);
              gb(k, j) += aik * g(i, j);
            }
            ga(i, k) = acc;
          }
        accumulate(n.lhs, ga);
        accumulate(n.rhs, gb);
        return;
      }
      case Op::BceLogits: {
        const Matrix& z = nodes_[n.lhs].value;
        const Matrix& y = nodes_[n.rhs].value;
        const double scale = g[0] / static_cast<double>(std::max<std::size_t>(z.size(), 1));
        Matrix gz(z.rows(), z.cols());
        Matrix gy(y.rows(), y.cols());
        for (std::size_t i = 0; i < z.size(); ++i) {
          gz[i] = scale * (detail::sigmoid(z[i]) - y[i]);
          gy[i] = -scale * z[i];
        }
        accumulate(n.lhs, gz);
        accumulate(n.rhs, gy);
        return;
      }
      case Op::Add:
      case Op::Mul:
      case Op::Div: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        Matrix ga(a.rows(), a.cols());
        Matrix gb(b.rows(), b.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) {
            const std::size_t ar = a.rows() == 1 ? 0 : r, ac = a.cols() == 1 ? 0 : c;
            const std::size_t br = b.rows() == 1 ? 0 : r, bc = b.cols() == 1 ? 0 : c;
            const double x = a(ar, ac), y = b(br, bc), up = g(r, c);
            if (n.op == Op::Add) {
              ga(ar, ac) += up;
              gb(br, bc) += up;
            } else if (n.op == Op::Mul) {
              ga(ar, ac) += up * y;
              gb(br, bc) += up * x;
            } else if (y != 0.0) {
              ga(ar, ac) += up / y;
              gb(br, bc) -= up * x / (y * y);
            }
          }
        accumulate(n.lhs, ga);
        accumulate(n.rhs, gb);
        return;
      }
      case Op::ReduceSum: {
        Matrix& ga = nodes_[n.lhs].grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        return;
      }
      default: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& out = n.value;
        Matrix& ga = nodes_[n.lhs].grad;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double x = a[i];
          double local = 0.0;
          switch (n.op) {
            case Op::Relu: local = x > 0 ? 1.0 : 0.0; break;
            case Op::Sigmoid: local = out[i] * (1.0 - out[i]); break;
            case Op::Abs: local = detail::sign(x); break;
            case Op::Log: local = 1.0 / x; break;
            case Op::ScalarMul: local = n.scalar; break;
            case Op::ClampMin: local = x > n.scalar ? 1.0 : 0.0; break;
            default: break;
          }
          ga[i] += g[i] * local;
        }
        return;
      }
    }
  }

  void accumulate(std::size_t id, const Matrix& delta) {
    Matrix& gr = nodes_[id].grad;
    for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += delta[i];
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
  std::size_t exit_ = 0;
  bool forwarded_ = false;
};

/// Local derivative of |x| used by the tape: sign(x) with sign(0) = 0.
inline Matrix abs_subgradient(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.values()) v = detail::sign(v);
  return out;
}

}  // namespace cnx::ad
