#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "flowvi/errors.hpp"

namespace flowvi {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Tracks live bytes of tape/adjoint storage and the high-water mark.
/// One meter can be shared by every tape involved in a single gradient
/// evaluation, so the recorded peak covers all phases of that evaluation.
class MemoryMeter {
 public:
  void add(std::size_t bytes) {
    current_ += bytes;
    if (current_ > peak_) peak_ = current_;
  }
  void sub(std::size_t bytes) { current_ -= (bytes > current_) ? current_ : bytes; }
  std::size_t current() const { return current_; }
  std::size_t peak() const { return peak_; }
  void reset_peak() { peak_ = current_; }

 private:
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
};

class Tape;

/// Handle to a recorded node: tape pointer plus node id. Values are
/// matrices; scalars are 1x1 and per-sample rows are 1xN.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kSquare,
  kColSum,
  kSumAll,
  kDot,
  kAffine,
  kScaleConst,
  kShiftConst,
  kStopGrad,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kSquare: return "square";
    case Op::kColSum: return "colsum";
    case Op::kSumAll: return "sum";
    case Op::kDot: return "dot";
    case Op::kAffine: return "affine";
    case Op::kScaleConst: return "scale_const";
    case Op::kShiftConst: return "shift_const";
    case Op::kStopGrad: return "stop_gradient";
  }
  return "?";
}

/// Adjoints of one backward sweep, indexed by node id. Owns its storage;
/// entries for nodes that were never reached stay empty and read as zero.
class Adjoints {
 public:
  Adjoints() = default;
  Adjoints(const Adjoints&) = delete;
  Adjoints& operator=(const Adjoints&) = delete;
  Adjoints(Adjoints&& other) noexcept { *this = std::move(other); }
  Adjoints& operator=(Adjoints&& other) noexcept {
    release();
    grads_ = std::move(other.grads_);
    bytes_ = other.bytes_;
    meter_ = other.meter_;
    other.grads_.clear();
    other.bytes_ = 0;
    other.meter_ = nullptr;
    return *this;
  }
  ~Adjoints() { release(); }

  bool has(const Var& v) const {
    return v.id >= 0 && v.id < static_cast<int>(grads_.size()) && grads_[v.id].size() > 0;
  }

  /// Adjoint of `v`, or an explicit zero matrix of the given shape if the
  /// node was not reached by the sweep.
  Matrix of(const Var& v, Eigen::Index rows, Eigen::Index cols) const {
    if (has(v)) return grads_[v.id];
    return Matrix::Zero(rows, cols);
  }

  const Matrix& raw(int id) const { return grads_[id]; }

 private:
  friend class Tape;
  void release() {
    if (meter_ != nullptr) meter_->sub(bytes_);
    grads_.clear();
    bytes_ = 0;
    meter_ = nullptr;
  }
  std::vector<Matrix> grads_;
  std::size_t bytes_ = 0;
  MemoryMeter* meter_ = nullptr;
};

/// Reverse-mode tape over f64 matrices. Node ids grow monotonically and
/// every node's inputs have smaller ids, so a single reverse sweep in
/// decreasing id order is a valid topological traversal.
///
/// Elementwise binary ops broadcast a column (r x 1) across columns and a
/// scalar (1 x 1) across everything; the backward pass reduces adjoints
/// back to the operand's shape.
class Tape {
 public:
  explicit Tape(MemoryMeter* meter = nullptr) : meter_(meter) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { reset(); }

  std::size_t size() const { return nodes_.size(); }

  void reset() {
    if (meter_ != nullptr) meter_->sub(bytes_);
    nodes_.clear();
    bytes_ = 0;
  }

  const Matrix& value(const Var& v) const {
    check_var(v);
    return nodes_[v.id].val;
  }

  bool needs_grad(const Var& v) const {
    check_var(v);
    return nodes_[v.id].needs_grad;
  }

  Var leaf(const Matrix& value, bool requires_grad) {
    return push(Op::kLeaf, -1, -1, -1, 0.0, value, requires_grad);
  }
  Var constant(const Matrix& value) { return leaf(value, false); }
  Var constant_scalar(double v) { return leaf(Matrix::Constant(1, 1, v), false); }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }
  Var div(Var a, Var b) { return binary(Op::kDiv, a, b); }

  Var neg(Var a) { return unary(Op::kNeg, a, -value(a)); }
  Var exp(Var a) { return unary(Op::kExp, a, value(a).array().exp().matrix()); }
  Var log(Var a) { return unary(Op::kLog, a, value(a).array().log().matrix()); }
  Var tanh(Var a) { return unary(Op::kTanh, a, value(a).array().tanh().matrix()); }
  Var square(Var a) { return unary(Op::kSquare, a, value(a).cwiseProduct(value(a))); }

  /// Per-sample reduction: (r x c) -> (1 x c).
  Var colsum(Var a) {
    check_var(a);
    Matrix v = value(a).colwise().sum();
    return push(Op::kColSum, a.id, -1, -1, 0.0, std::move(v), nodes_[a.id].needs_grad);
  }

  /// Full reduction to a scalar.
  Var sum(Var a) {
    check_var(a);
    Matrix v = Matrix::Constant(1, 1, value(a).sum());
    return push(Op::kSumAll, a.id, -1, -1, 0.0, std::move(v), nodes_[a.id].needs_grad);
  }

  /// Frobenius inner product of two same-shape matrices -> scalar.
  Var dot(Var a, Var b) {
    check_var(a);
    check_var(b);
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw UsageError("dot: shape mismatch");
    }
    Matrix v = Matrix::Constant(1, 1, value(a).cwiseProduct(value(b)).sum());
    return push(Op::kDot, a.id, b.id, -1, 0.0, std::move(v),
                nodes_[a.id].needs_grad || nodes_[b.id].needs_grad);
  }

  /// W (m x n) * x (n x N) + b (m x 1) broadcast over columns.
  Var affine(Var w, Var x, Var b) {
    check_var(w);
    check_var(x);
    check_var(b);
    const Matrix& wv = value(w);
    const Matrix& xv = value(x);
    const Matrix& bv = value(b);
    if (wv.cols() != xv.rows() || bv.rows() != wv.rows() || bv.cols() != 1) {
      throw UsageError("affine: shape mismatch");
    }
    Matrix v = wv * xv;
    v.colwise() += bv.col(0);
    return push(Op::kAffine, w.id, x.id, b.id, 0.0, std::move(v),
                nodes_[w.id].needs_grad || nodes_[x.id].needs_grad || nodes_[b.id].needs_grad);
  }

  /// Multiply by a compile-time constant scalar.
  Var scale(Var a, double k) {
    check_var(a);
    return push(Op::kScaleConst, a.id, -1, -1, k, value(a) * k, nodes_[a.id].needs_grad);
  }

  /// Add a compile-time constant scalar.
  Var shift(Var a, double k) {
    check_var(a);
    return push(Op::kShiftConst, a.id, -1, -1, k, value(a).array() + k,
                nodes_[a.id].needs_grad);
  }

  /// Value-transparent gradient barrier: the forward value is copied
  /// bit-for-bit, the backward pass contributes nothing to the input.
  Var stop_gradient(Var a) {
    check_var(a);
    return push(Op::kStopGrad, a.id, -1, -1, 0.0, value(a), false);
  }

  /// Reverse sweep from a scalar output. Visits nodes in decreasing id
  /// order exactly once; nodes unreachable from the output keep zero
  /// adjoints, as do stop-gradient inputs and const leaves.
  Adjoints backward(Var output) {
    check_var(output);
    const Matrix& out = value(output);
    if (out.rows() != 1 || out.cols() != 1) {
      throw UsageError("backward: output must be scalar (1x1)");
    }
    Adjoints adj;
    adj.meter_ = meter_;
    adj.grads_.resize(output.id + 1);
    set_adj(adj, output.id, Matrix::Constant(1, 1, 1.0));
    for (int i = output.id; i >= 0; --i) {
      if (adj.grads_[i].size() == 0) continue;
      propagate(adj, i);
    }
    return adj;
  }

 private:
  struct Node {
    Op op;
    int a, b, c;
    double k;
    bool needs_grad;
    Matrix val;
  };

  void check_var(const Var& v) const {
    if (v.tape != this) throw UsageError("input recorded on a different tape");
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw UsageError("invalid node id");
  }

  Var push(Op op, int a, int b, int c, double k, Matrix val, bool needs_grad) {
    if (!val.allFinite()) {
      throw NumericError(std::string("non-finite value recorded by op '") + op_name(op) + "'");
    }
    bytes_ += sizeof(Node) + static_cast<std::size_t>(val.size()) * sizeof(double);
    if (meter_ != nullptr) {
      meter_->add(sizeof(Node) + static_cast<std::size_t>(val.size()) * sizeof(double));
    }
    nodes_.push_back(Node{op, a, b, c, k, needs_grad, std::move(val)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var unary(Op op, Var a, Matrix val) {
    check_var(a);
    return push(op, a.id, -1, -1, 0.0, std::move(val), nodes_[a.id].needs_grad);
  }

  static bool same_shape(const Matrix& x, const Matrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols();
  }

  /// Broadcast `m` to (rows x cols); m is either full-shape, a column, or a scalar.
  static Matrix broadcast_to(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
    if (m.rows() == rows && m.cols() == cols) return m;
    if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
    if (m.rows() == rows && m.cols() == 1) return m.replicate(1, cols);
    throw UsageError("elementwise op: incompatible shapes for broadcast");
  }

  /// Reduce a full-shape adjoint back to the operand's (broadcast) shape.
  static Matrix reduce_like(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
    if (rows == g.rows() && cols == 1) return g.rowwise().sum();
    throw UsageError("elementwise op: cannot reduce adjoint");
  }

  Var binary(Op op, Var a, Var b) {
    check_var(a);
    check_var(b);
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    Eigen::Index rows = std::max(av.rows(), bv.rows());
    Eigen::Index cols = std::max(av.cols(), bv.cols());
    Matrix ab = broadcast_to(av, rows, cols);
    Matrix bb = broadcast_to(bv, rows, cols);
    Matrix v;
    switch (op) {
      case Op::kAdd: v = ab + bb; break;
      case Op::kSub: v = ab - bb; break;
      case Op::kMul: v = ab.cwiseProduct(bb); break;
      case Op::kDiv: v = ab.cwiseQuotient(bb); break;
      default: throw UsageError("binary: bad op");
    }
    return push(op, a.id, b.id, -1, 0.0, std::move(v),
                nodes_[a.id].needs_grad || nodes_[b.id].needs_grad);
  }

  void set_adj(Adjoints& adj, int id, Matrix g) {
    std::size_t bytes = static_cast<std::size_t>(g.size()) * sizeof(double);
    adj.grads_[id] = std::move(g);
    adj.bytes_ += bytes;
    if (meter_ != nullptr) meter_->add(bytes);
  }

  /// Accumulate `g` into the adjoint of node `id`; skipped entirely when the
  /// target does not require gradients (stop-gradient ancestors, const leaves).
  void accumulate(Adjoints& adj, int id, const Matrix& g) {
    if (!nodes_[id].needs_grad) return;
    if (adj.grads_[id].size() == 0) {
      set_adj(adj, id, g);
    } else {
      adj.grads_[id] += g;
    }
  }

  void propagate(Adjoints& adj, int i) {
    const Node& n = nodes_[i];
    const Matrix& g = adj.grads_[i];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kStopGrad:
        return;
      case Op::kAdd: {
        const Matrix& av = nodes_[n.a].val;
        const Matrix& bv = nodes_[n.b].val;
        accumulate(adj, n.a, reduce_like(g, av.rows(), av.cols()));
        accumulate(adj, n.b, reduce_like(g, bv.rows(), bv.cols()));
        return;
      }
      case Op::kSub: {
        const Matrix& av = nodes_[n.a].val;
        const Matrix& bv = nodes_[n.b].val;
        accumulate(adj, n.a, reduce_like(g, av.rows(), av.cols()));
        accumulate(adj, n.b, reduce_like(-g, bv.rows(), bv.cols()));
        return;
      }
      case Op::kMul: {
        const Matrix& av = nodes_[n.a].val;
        const Matrix& bv = nodes_[n.b].val;
        if (nodes_[n.a].needs_grad) {
          Matrix bb = broadcast_to(bv, g.rows(), g.cols());
          accumulate(adj, n.a, reduce_like(g.cwiseProduct(bb), av.rows(), av.cols()));
        }
        if (nodes_[n.b].needs_grad) {
          Matrix ab = broadcast_to(av, g.rows(), g.cols());
          accumulate(adj, n.b, reduce_like(g.cwiseProduct(ab), bv.rows(), bv.cols()));
        }
        return;
      }
      case Op::kDiv: {
        const Matrix& av = nodes_[n.a].val;
        const Matrix& bv = nodes_[n.b].val;
        Matrix bb = broadcast_to(bv, g.rows(), g.cols());
        if (nodes_[n.a].needs_grad) {
          accumulate(adj, n.a, reduce_like(g.cwiseQuotient(bb), av.rows(), av.cols()));
        }
        if (nodes_[n.b].needs_grad) {
          Matrix ab = broadcast_to(av, g.rows(), g.cols());
          Matrix gb = -g.cwiseProduct(ab).cwiseQuotient(bb.cwiseProduct(bb));
          accumulate(adj, n.b, reduce_like(gb, bv.rows(), bv.cols()));
        }
        return;
      }
      case Op::kNeg:
        accumulate(adj, n.a, -g);
        return;
      case Op::kExp:
        accumulate(adj, n.a, g.cwiseProduct(n.val));
        return;
      case Op::kLog:
        accumulate(adj, n.a, g.cwiseQuotient(nodes_[n.a].val));
        return;
      case Op::kTanh: {
        Matrix d = (1.0 - n.val.array().square()).matrix();
        accumulate(adj, n.a, g.cwiseProduct(d));
        return;
      }
      case Op::kSquare:
        accumulate(adj, n.a, 2.0 * g.cwiseProduct(nodes_[n.a].val));
        return;
      case Op::kColSum: {
        const Matrix& av = nodes_[n.a].val;
        accumulate(adj, n.a, Matrix::Ones(av.rows(), 1) * g);
        return;
      }
      case Op::kSumAll: {
        const Matrix& av = nodes_[n.a].val;
        accumulate(adj, n.a, Matrix::Constant(av.rows(), av.cols(), g(0, 0)));
        return;
      }
      case Op::kDot: {
        accumulate(adj, n.a, g(0, 0) * nodes_[n.b].val);
        accumulate(adj, n.b, g(0, 0) * nodes_[n.a].val);
        return;
      }
      case Op::kAffine: {
        const Matrix& wv = nodes_[n.a].val;
        const Matrix& xv = nodes_[n.b].val;
        if (nodes_[n.a].needs_grad) accumulate(adj, n.a, g * xv.transpose());
        if (nodes_[n.b].needs_grad) accumulate(adj, n.b, wv.transpose() * g);
        if (nodes_[n.c].needs_grad) accumulate(adj, n.c, g.rowwise().sum());
        return;
      }
      case Op::kScaleConst:
        accumulate(adj, n.a, g * n.k);
        return;
      case Op::kShiftConst:
        accumulate(adj, n.a, g);
        return;
    }
  }

  std::vector<Node> nodes_;
  std::size_t bytes_ = 0;
  MemoryMeter* meter_ = nullptr;
};

}  // namespace flowvi
