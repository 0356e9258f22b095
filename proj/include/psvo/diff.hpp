/// @file diff.hpp Define-by-run reverse-mode differentiation over dense matrices.
///
/// A Tape records every operation as a node holding its primal value. Nodes are
/// appended in creation order, which is also a topological order, so the backward
/// pass walks ids from the root down to zero and visits each node once.
///
/// Vectors are stored as (n,1) or (1,n) matrices. Batches of particles are stored
/// row-wise, so an operation on an N×d matrix handles N particles in one node.
/// There is no implicit broadcasting; use broadcast() to tile rows or columns.

#ifndef PSVO_DIFF_HPP
#define PSVO_DIFF_HPP

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace psvo {

/// Raised when a numerical precondition fails at run time (non-PD matrix, weight underflow).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using NodeId = std::size_t;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

class Tape;

/// Handle to a node on a Tape. Valid only against the Tape that created it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] NodeId id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const;
  [[nodiscard]] bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

using Gradients = std::unordered_map<NodeId, Matrix>;

class Tape {
 public:
  using BackwardFn = void (*)(Tape&, NodeId);

  struct Node {
    Matrix value;
    Matrix grad;
    std::array<NodeId, 3> in{};
    int n_in = 0;
    bool needs_grad = false;
    bool is_leaf = false;
    BackwardFn backward = nullptr;
    double c = 0.0;
    std::vector<Index> idx;
    Matrix aux;
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Trainable leaf. Gradients accumulate into it during backward().
  Var leaf(Matrix value) {
    check_shape(value);
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    n.is_leaf = true;
    return append(std::move(n));
  }

  /// Leaf built from a flat row-major buffer.
  Var leaf(std::span<const double> values, Index rows, Index cols) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("tape leaf: degenerate shape");
    if (static_cast<Index>(values.size()) != rows * cols) {
      throw std::invalid_argument("tape leaf: buffer length " + std::to_string(values.size()) +
                                  " does not match shape " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
    }
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = values[static_cast<std::size_t>(r * cols + c)];
    return leaf(std::move(m));
  }

  /// Non-differentiable input (data, noise).
  Var constant(Matrix value) {
    check_shape(value);
    Node n;
    n.value = std::move(value);
    return append(std::move(n));
  }

  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  Node& node(NodeId id) { return nodes_[id]; }
  [[nodiscard]] const Node& node(NodeId id) const { return nodes_[id]; }

  /// Reverse sweep from a scalar root. Returns d(root)/d(leaf) for every trainable leaf;
  /// leaves the root does not depend on map to zero.
  Gradients backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (root.rows() != 1 || root.cols() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got " + std::to_string(root.rows()) +
                                  "x" + std::to_string(root.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id()].grad = Matrix::Ones(1, 1);
    for (NodeId id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward != nullptr && n.needs_grad && n.grad.size() != 0) n.backward(*this, id);
    }
    Gradients out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (!n.is_leaf) continue;
      out.emplace(id, n.grad.size() != 0 ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols()));
    }
    return out;
  }

  /// Gradient of node `v` from the last backward() call (zeros if it received none).
  [[nodiscard]] Matrix grad(Var v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.size() != 0 ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
  }

  template <typename Derived>
  void accumulate(NodeId id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Appends an operation node. `inputs` must already live on this tape.
  Var push(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    int i = 0;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw std::invalid_argument("operation mixes values from different tapes");
      n.in[static_cast<std::size_t>(i++)] = v.id();
      n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    n.n_in = i;
    if (n.needs_grad) n.backward = fn;
    return append(std::move(n));
  }

 private:
  static void check_shape(const Matrix& m) {
    if (m.rows() <= 0 || m.cols() <= 0) throw std::invalid_argument("tape: degenerate shape");
  }

  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->node(id_).value; }
inline bool Var::needs_grad() const { return tape_->node(id_).needs_grad; }
inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("scalar(): value is not 1x1");
  return v(0, 0);
}

namespace detail {

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                                shape_str(b.value()));
  }
}

inline Tape::Node& self(Tape& t, NodeId id) { return t.node(id); }
inline const Matrix& input_value(Tape& t, NodeId id, int k) {
  return t.node(t.node(id).in[static_cast<std::size_t>(k)]).value;
}
inline NodeId input_id(Tape& t, NodeId id, int k) { return t.node(id).in[static_cast<std::size_t>(k)]; }

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a, b);
  return a.tape()->push(a.value() + b.value(), {a, b}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    t.accumulate(detail::input_id(t, id, 0), g);
    t.accumulate(detail::input_id(t, id, 1), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a, b);
  return a.tape()->push(a.value() - b.value(), {a, b}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad;
    t.accumulate(detail::input_id(t, id, 0), g);
    t.accumulate(detail::input_id(t, id, 1), -g);
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a, b);
  return a.tape()->push(a.value().cwiseProduct(b.value()), {a, b}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    const Matrix ga = g.cwiseProduct(detail::input_value(t, id, 1));
    const Matrix gb = g.cwiseProduct(detail::input_value(t, id, 0));
    t.accumulate(detail::input_id(t, id, 0), ga);
    t.accumulate(detail::input_id(t, id, 1), gb);
  });
}

inline Var div(Var a, Var b) {
  detail::require_same_shape("div", a, b);
  return a.tape()->push(a.value().cwiseQuotient(b.value()), {a, b}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    const Matrix& bv = detail::input_value(t, id, 1);
    const Matrix& out = t.node(id).value;
    const Matrix ga = g.cwiseQuotient(bv);
    const Matrix gb = -ga.cwiseProduct(out);
    t.accumulate(detail::input_id(t, id, 0), ga);
    t.accumulate(detail::input_id(t, id, 1), gb);
  });
}

inline Var neg(Var a) {
  return a.tape()->push(-a.value(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = -t.node(id).grad;
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var scalar_mul(double c, Var a) {
  Var out = a.tape()->push(c * a.value(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).c * t.node(id).grad;
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).c = c;
  return out;
}

inline Var add_scalar(Var a, double c) {
  return a.tape()->push(a.value().array() + c, {a}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad;
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

// 1 − 2/(e^{2x}+1) vectorizes through Eigen's exp; std::tanh does not and dominated the
// profile. Absolute error stays below 1e-15.
inline Var tanh(Var a) {
  Matrix y = (1.0 - 2.0 / ((2.0 * a.value().array()).exp() + 1.0)).matrix();
  return a.tape()->push(std::move(y), {a}, [](Tape& t, NodeId id) {
    const Matrix& y = t.node(id).value;
    const Matrix g = t.node(id).grad.array() * (1.0 - y.array().square());
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var relu(Var a) {
  return a.tape()->push(a.value().cwiseMax(0.0), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Matrix g = (x.array() > 0.0).select(t.node(id).grad, 0.0);
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var exp(Var a) {
  return a.tape()->push(a.value().array().exp().matrix(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad.cwiseProduct(t.node(id).value);
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// Natural log; non-positive inputs give -inf/NaN primals without raising.
inline Var log(Var a) {
  return a.tape()->push(a.value().array().log().matrix(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad.cwiseQuotient(detail::input_value(t, id, 0));
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var square(Var a) {
  return a.tape()->push(a.value().array().square().matrix(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = 2.0 * t.node(id).grad.cwiseProduct(detail::input_value(t, id, 0));
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// max(a, lo) elementwise; gradient passes only where a > lo.
inline Var clamp_min(Var a, double lo) {
  Var out = a.tape()->push(a.value().cwiseMax(lo), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Matrix g = (x.array() > t.node(id).c).select(t.node(id).grad, 0.0);
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).c = lo;
  return out;
}

/// Identity on the primal; contributes nothing to its input's gradient.
inline Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

// ---------------------------------------------------------------------------------------------
// Linear algebra and reductions

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ " + detail::shape_str(a.value()) + " * " +
                                detail::shape_str(b.value()));
  }
  return a.tape()->push(a.value() * b.value(), {a, b}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    const NodeId ia = detail::input_id(t, id, 0);
    const NodeId ib = detail::input_id(t, id, 1);
    if (t.node(ia).needs_grad) {
      const Matrix ga = g * t.node(ib).value.transpose();
      t.accumulate(ia, ga);
    }
    if (t.node(ib).needs_grad) {
      const Matrix gb = t.node(ia).value.transpose() * g;
      t.accumulate(ib, gb);
    }
  });
}

/// Matrix (m×n) times column vector (n×1).
inline Var matvec(Var m, Var v) {
  if (v.cols() != 1) throw std::invalid_argument("matvec: right operand must be a column vector");
  return matmul(m, v);
}

inline Var transpose(Var a) {
  return a.tape()->push(a.value().transpose(), {a}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad.transpose();
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var sum(Var a) {
  return a.tape()->push(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Matrix g = Matrix::Constant(x.rows(), x.cols(), t.node(id).grad(0, 0));
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

inline Var dot(Var a, Var b) {
  detail::require_same_shape("dot", a, b);
  return a.tape()->push(Matrix::Constant(1, 1, a.value().cwiseProduct(b.value()).sum()), {a, b},
                        [](Tape& t, NodeId id) {
                          const double g = t.node(id).grad(0, 0);
                          const Matrix ga = g * detail::input_value(t, id, 1);
                          const Matrix gb = g * detail::input_value(t, id, 0);
                          t.accumulate(detail::input_id(t, id, 0), ga);
                          t.accumulate(detail::input_id(t, id, 1), gb);
                        });
}

/// Row sums: N×C -> N×1.
inline Var row_sum(Var a) {
  return a.tape()->push(a.value().rowwise().sum(), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Matrix g = t.node(id).grad.replicate(1, x.cols());
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// Tiles a 1×1, 1×C or N×1 value to rows×cols. Same-shape input passes through.
inline Var broadcast(Var a, Index rows, Index cols) {
  const Index r = a.rows();
  const Index c = a.cols();
  if (r == rows && c == cols) return a;
  if (!((r == 1 || r == rows) && (c == 1 || c == cols))) {
    throw std::invalid_argument("broadcast: cannot tile " + detail::shape_str(a.value()) + " to " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix v = a.value().replicate(rows / r, cols / c);
  return a.tape()->push(std::move(v), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Matrix& g = t.node(id).grad;
    Matrix gx;
    if (x.rows() == 1 && x.cols() == 1) {
      gx = Matrix::Constant(1, 1, g.sum());
    } else if (x.rows() == 1) {
      gx = g.colwise().sum();
    } else {
      gx = g.rowwise().sum();
    }
    t.accumulate(detail::input_id(t, id, 0), gx);
  });
}

/// Selects rows by index (repeats allowed). Gradient scatter-adds.
inline Var gather_rows(Var a, std::vector<Index> rows) {
  const Matrix& x = a.value();
  Matrix v(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = x.row(rows[i]);
  }
  Var out = a.tape()->push(std::move(v), {a}, [](Tape& t, NodeId id) {
    const Tape::Node& n = t.node(id);
    const Matrix& x = detail::input_value(t, id, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < n.idx.size(); ++i) g.row(n.idx[i]) += n.grad.row(static_cast<Index>(i));
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).idx = std::move(rows);
  return out;
}

/// Picks one column per row: out(i) = a(i, cols[i]); N×C -> N×1.
inline Var pick_cols(Var a, std::vector<Index> cols) {
  const Matrix& x = a.value();
  if (static_cast<Index>(cols.size()) != x.rows()) throw std::invalid_argument("pick_cols: need one index per row");
  Matrix v(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) {
    const Index c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= x.cols()) throw std::out_of_range("pick_cols: index out of range");
    v(i, 0) = x(i, c);
  }
  Var out = a.tape()->push(std::move(v), {a}, [](Tape& t, NodeId id) {
    const Tape::Node& n = t.node(id);
    const Matrix& x = detail::input_value(t, id, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) g(i, n.idx[static_cast<std::size_t>(i)]) = n.grad(i, 0);
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).idx = std::move(cols);
  return out;
}

inline Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.rows()) throw std::out_of_range("slice_rows: bad range");
  Var out = a.tape()->push(a.value().middleRows(start, count), {a}, [](Tape& t, NodeId id) {
    const Tape::Node& n = t.node(id);
    const Matrix& x = detail::input_value(t, id, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleRows(n.idx[0], n.value.rows()) = n.grad;
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).idx = {start};
  return out;
}

inline Var row(Var a, Index i) { return slice_rows(a, i, 1); }

inline Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols()) throw std::out_of_range("slice_cols: bad range");
  Var out = a.tape()->push(a.value().middleCols(start, count), {a}, [](Tape& t, NodeId id) {
    const Tape::Node& n = t.node(id);
    const Matrix& x = detail::input_value(t, id, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleCols(n.idx[0], n.value.cols()) = n.grad;
    t.accumulate(detail::input_id(t, id, 0), g);
  });
  out.tape()->node(out.id()).idx = {start};
  return out;
}

namespace detail {

// Concatenation takes any number of inputs, so its inputs are kept in idx rather than `in`.
template <bool Rows>
Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape* tape = parts.front().tape();
  Index total = 0;
  const Index other = Rows ? parts.front().cols() : parts.front().rows();
  bool needs = false;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw std::invalid_argument("concat: values from different tapes");
    if ((Rows ? p.cols() : p.rows()) != other) throw std::invalid_argument("concat: incompatible shapes");
    total += Rows ? p.rows() : p.cols();
    needs = needs || p.needs_grad();
  }
  Matrix v = Rows ? Matrix(total, other) : Matrix(other, total);
  Index off = 0;
  for (const Var& p : parts) {
    if constexpr (Rows) {
      v.middleRows(off, p.rows()) = p.value();
      off += p.rows();
    } else {
      v.middleCols(off, p.cols()) = p.value();
      off += p.cols();
    }
  }
  Var out = tape->push(std::move(v), {}, nullptr);
  Tape::Node& n = tape->node(out.id());
  n.needs_grad = needs;
  if (needs) {
    n.idx.reserve(parts.size());
    for (const Var& p : parts) n.idx.push_back(static_cast<Index>(p.id()));
    n.backward = [](Tape& t, NodeId id) {
      const std::vector<Index> ids = t.node(id).idx;
      Index off = 0;
      for (Index in : ids) {
        const auto nid = static_cast<NodeId>(in);
        const Matrix& x = t.node(nid).value;
        if constexpr (Rows) {
          const Matrix g = t.node(id).grad.middleRows(off, x.rows());
          t.accumulate(nid, g);
          off += x.rows();
        } else {
          const Matrix g = t.node(id).grad.middleCols(off, x.cols());
          t.accumulate(nid, g);
          off += x.cols();
        }
      }
    };
  }
  return out;
}

}  // namespace detail

inline Var concat_rows(std::span<const Var> parts) { return detail::concat<true>(parts); }
inline Var concat_cols(std::span<const Var> parts) { return detail::concat<false>(parts); }

/// Reshape in row-major element order.
inline Var reshape(Var a, Index rows, Index cols) {
  const Matrix& x = a.value();
  if (rows * cols != x.size()) throw std::invalid_argument("reshape: element count changes");
  Matrix v(rows, cols);
  for (Index i = 0; i < x.size(); ++i) v(i / cols, i % cols) = x(i / x.cols(), i % x.cols());
  return a.tape()->push(std::move(v), {a}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    const Matrix& x = detail::input_value(t, id, 0);
    Matrix gx(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) gx(i / x.cols(), i % x.cols()) = g(i / g.cols(), i % g.cols());
    t.accumulate(detail::input_id(t, id, 0), gx);
  });
}

/// log Σ_j exp(a_ij) per row; N×C -> N×1. Rows that are entirely -inf give -inf.
inline Var logsumexp_rows(Var a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) {
      v(i, 0) = m;
      continue;
    }
    v(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return a.tape()->push(std::move(v), {a}, [](Tape& t, NodeId id) {
    const Matrix& x = detail::input_value(t, id, 0);
    const Tape::Node& n = t.node(id);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      const double lse = n.value(i, 0);
      if (!std::isfinite(lse)) continue;
      g.row(i) = n.grad(i, 0) * (x.row(i).array() - lse).exp();
    }
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// log Σ exp over every entry; -> 1×1.
inline Var logsumexp(Var a) { return logsumexp_rows(reshape(a, 1, a.value().size())); }

/// Places a 1×d row on the diagonal of a d×d matrix.
inline Var diag_embed(Var v) {
  if (v.rows() != 1) throw std::invalid_argument("diag_embed: expects a row vector");
  Matrix m = v.value().row(0).asDiagonal();
  return v.tape()->push(std::move(m), {v}, [](Tape& t, NodeId id) {
    const Matrix g = t.node(id).grad.diagonal().transpose();
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// Builds a symmetric d×d matrix from a 1×(d(d+1)/2) row holding the upper triangle
/// row by row. Off-diagonal entries are written to both halves.
inline Var symmetric_from_packed(Var v, Index d) {
  if (v.rows() != 1 || v.cols() != d * (d + 1) / 2) throw std::invalid_argument("symmetric_from_packed: bad length");
  Matrix m(d, d);
  Index k = 0;
  for (Index i = 0; i < d; ++i)
    for (Index j = i; j < d; ++j, ++k) m(i, j) = m(j, i) = v.value()(0, k);
  return v.tape()->push(std::move(m), {v}, [](Tape& t, NodeId id) {
    const Matrix& g = t.node(id).grad;
    const Index d = g.rows();
    Matrix gv(1, d * (d + 1) / 2);
    Index k = 0;
    for (Index i = 0; i < d; ++i)
      for (Index j = i; j < d; ++j, ++k) gv(0, k) = (i == j) ? g(i, i) : g(i, j) + g(j, i);
    t.accumulate(detail::input_id(t, id, 0), gv);
  });
}

inline Var inverse(Var a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("inverse: matrix not square");
  Eigen::PartialPivLU<Matrix> lu(a.value());
  if (std::abs(lu.determinant()) == 0.0) throw NumericalError("inverse: singular matrix");
  return a.tape()->push(lu.inverse(), {a}, [](Tape& t, NodeId id) {
    const Matrix& inv = t.node(id).value;
    const Matrix g = -inv.transpose() * t.node(id).grad * inv.transpose();
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

/// Lower Cholesky factor of a symmetric positive-definite matrix. The backward rule
/// returns the symmetrized adjoint, correct for inputs built symmetric.
inline Var cholesky(Var a, std::string_view label = "matrix") {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky: matrix not square");
  Eigen::LLT<Matrix> llt(a.value());
  if (llt.info() != Eigen::Success) {
    throw NumericalError("cholesky: " + std::string(label) + " is not positive definite");
  }
  Matrix l = llt.matrixL();
  return a.tape()->push(std::move(l), {a}, [](Tape& t, NodeId id) {
    const Matrix& L = t.node(id).value;
    const Matrix& Lbar = t.node(id).grad;
    Matrix P = L.transpose() * Lbar;
    P.triangularView<Eigen::StrictlyUpper>().setZero();
    P.diagonal() *= 0.5;
    // S̄ = L^{-T} P L^{-1}
    Matrix tmp = L.transpose().triangularView<Eigen::Upper>().solve(P);
    Matrix sbar = L.transpose().triangularView<Eigen::Upper>().solve(tmp.transpose()).transpose();
    const Matrix g = 0.5 * (sbar + sbar.transpose());
    t.accumulate(detail::input_id(t, id, 0), g);
  });
}

// ---------------------------------------------------------------------------------------------
// Fused Gaussian log-densities

/// Row-wise diagonal Gaussian log-density: out(i) = log N(x_i; mean_i, diag(exp(2 log_std_i))).
/// All three inputs are N×d; returns N×1.
inline Var diag_gaussian_log_pdf_rows(Var x, Var mean, Var log_std) {
  detail::require_same_shape("diag_gaussian_log_pdf_rows", x, mean);
  detail::require_same_shape("diag_gaussian_log_pdf_rows", x, log_std);
  const auto r = ((x.value() - mean.value()).array() * (-log_std.value().array()).exp());
  const Index d = x.cols();
  Matrix v = (-0.5 * r.square() - log_std.value().array()).rowwise().sum().matrix();
  v.array() -= 0.5 * static_cast<double>(d) * kLog2Pi;
  return x.tape()->push(std::move(v), {x, mean, log_std}, [](Tape& t, NodeId id) {
    const Matrix& xv = detail::input_value(t, id, 0);
    const Matrix& mv = detail::input_value(t, id, 1);
    const Matrix& lv = detail::input_value(t, id, 2);
    const Matrix& g = t.node(id).grad;
    const Eigen::ArrayXXd inv_std = (-lv.array()).exp();
    const Eigen::ArrayXXd r = (xv - mv).array() * inv_std;
    const Eigen::ArrayXXd gcol = g.replicate(1, xv.cols()).array();
    const Matrix gx = (-gcol * r * inv_std).matrix();
    t.accumulate(detail::input_id(t, id, 0), gx);
    const Matrix gm = -gx;
    t.accumulate(detail::input_id(t, id, 1), gm);
    const Matrix gl = (gcol * (r.square() - 1.0)).matrix();
    t.accumulate(detail::input_id(t, id, 2), gl);
  });
}

/// Cross log-density of every row of x (N×d) under every diagonal Gaussian component
/// with means (K×d) and a shared 1×d log_std; returns N×K.
inline Var pairwise_diag_gaussian_log_pdf(Var x, Var means, Var log_std) {
  const Index n = x.rows();
  const Index k = means.rows();
  const Index d = x.cols();
  if (means.cols() != d || log_std.rows() != 1 || log_std.cols() != d) {
    throw std::invalid_argument("pairwise_diag_gaussian_log_pdf: shape mismatch");
  }
  const Eigen::RowVectorXd ls = log_std.value().row(0);
  const Eigen::RowVectorXd prec = (-2.0 * ls.array()).exp();
  const double base = -0.5 * static_cast<double>(d) * kLog2Pi - ls.sum();
  const Matrix& xv = x.value();
  const Matrix& mv = means.value();
  Matrix v(n, k);
  for (Index j = 0; j < k; ++j) {
    for (Index i = 0; i < n; ++i) {
      double q = 0.0;
      for (Index c = 0; c < d; ++c) {
        const double diff = xv(i, c) - mv(j, c);
        q += diff * diff * prec(c);
      }
      v(i, j) = base - 0.5 * q;
    }
  }
  return x.tape()->push(std::move(v), {x, means, log_std}, [](Tape& t, NodeId id) {
    const Matrix& xv = detail::input_value(t, id, 0);
    const Matrix& mv = detail::input_value(t, id, 1);
    const Matrix& lv = detail::input_value(t, id, 2);
    const Matrix& g = t.node(id).grad;
    const Index n = xv.rows();
    const Index k = mv.rows();
    const Index d = xv.cols();
    const Eigen::RowVectorXd prec = (-2.0 * lv.row(0).array()).exp();
    Matrix gx = Matrix::Zero(n, d);
    Matrix gm = Matrix::Zero(k, d);
    Matrix gl = Matrix::Zero(1, d);
    for (Index j = 0; j < k; ++j) {
      for (Index i = 0; i < n; ++i) {
        const double gij = g(i, j);
        if (gij == 0.0) continue;
        for (Index c = 0; c < d; ++c) {
          const double diff = xv(i, c) - mv(j, c);
          const double s = gij * diff * prec(c);
          gx(i, c) -= s;
          gm(j, c) += s;
          gl(0, c) += gij * (diff * diff * prec(c) - 1.0);
        }
      }
    }
    t.accumulate(detail::input_id(t, id, 0), gx);
    t.accumulate(detail::input_id(t, id, 1), gm);
    t.accumulate(detail::input_id(t, id, 2), gl);
  });
}

/// Log-density of every row of x (N×d) under N(mean, cov) with mean 1×d and a full
/// symmetric positive-definite cov (d×d); returns N×1.
inline Var full_gaussian_log_pdf(Var x, Var mean, Var cov, std::string_view label = "covariance") {
  const Index d = x.cols();
  if (mean.rows() != 1 || mean.cols() != d || cov.rows() != d || cov.cols() != d) {
    throw std::invalid_argument("full_gaussian_log_pdf: shape mismatch");
  }
  Eigen::LLT<Matrix> llt(cov.value());
  if (llt.info() != Eigen::Success) {
    throw NumericalError("full_gaussian_log_pdf: " + std::string(label) + " is not positive definite");
  }
  const Matrix L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const Matrix r = (x.value().rowwise() - mean.value().row(0)).transpose();  // d×N
  const Matrix y = L.triangularView<Eigen::Lower>().solve(r);
  Matrix v = (-0.5 * y.colwise().squaredNorm().array() - 0.5 * logdet -
              0.5 * static_cast<double>(d) * kLog2Pi)
                 .matrix()
                 .transpose();
  Var out = x.tape()->push(std::move(v), {x, mean, cov}, [](Tape& t, NodeId id) {
    const Matrix& xv = detail::input_value(t, id, 0);
    const Matrix& mv = detail::input_value(t, id, 1);
    const Matrix& sinv = t.node(id).aux;
    const Matrix& g = t.node(id).grad;  // N×1
    const Matrix r = (xv.rowwise() - mv.row(0)).transpose();  // d×N
    const Matrix u = sinv * r;                                 // d×N, S^{-1} r_n
    const Matrix gx = -(u * g.asDiagonal()).transpose();       // N×d
    t.accumulate(detail::input_id(t, id, 0), gx);
    const Matrix gm = -gx.colwise().sum();
    t.accumulate(detail::input_id(t, id, 1), gm);
    const Matrix gs = 0.5 * (u * g.asDiagonal() * u.transpose() - g.sum() * sinv);
    t.accumulate(detail::input_id(t, id, 2), gs);
  });
  if (out.needs_grad()) {
    out.tape()->node(out.id()).aux = llt.solve(Matrix::Identity(d, d));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Operator sugar

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scalar_mul(c, a); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace ad
}  // namespace psvo

#endif  // PSVO_DIFF_HPP
