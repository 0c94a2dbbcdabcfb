#pragma once

#include <memory>

#include "flowvi/tape.hpp"

namespace flowvi {

/// Unnormalized log-density: the Boltzmann target is p(x) = exp(-S(x))/Z.
/// Implementations record S as a 1xN row (one entry per batch column) so
/// that both values and gradients come from the same tape program.
class Target {
 public:
  virtual ~Target() = default;

  /// Record S(x) for a batch x (dim x N), returning a 1xN row node.
  virtual Var record_action(Tape& tape, Var x) const = 0;

  /// Whether S(-x) = S(x); even targets admit the overrelaxation move.
  virtual bool even() const { return false; }

  RowVector action_values(const Matrix& x) const {
    Tape tape;
    Var xl = tape.constant(x);
    Var s = record_action(tape, xl);
    return tape.value(s).row(0);
  }

  /// dS/dx per sample, via a backward sweep of sum_i S(x_i).
  Matrix action_grad_values(const Matrix& x) const {
    Tape tape;
    Var xl = tape.leaf(x, true);
    Var s = record_action(tape, xl);
    Adjoints adj = tape.backward(tape.sum(s));
    return adj.of(xl, x.rows(), x.cols());
  }
};

/// Lattice action of a particle in a quartic double well:
///   S(x) = a * sum_t [ m0/2 (x_{t+1} - x_t)^2 + V(x_t) ],
///   V(u)  = m0*mu2/2 u^2 + lambda/4 u^4,
/// with periodic boundary x_T == x_0. Even in x, so the mirror move is exact.
class DoubleWellAction : public Target {
 public:
  DoubleWellAction(int lattice_size, double spacing, double m0, double mu2, double lambda)
      : lattice_size_(lattice_size), spacing_(spacing), m0_(m0), mu2_(mu2), lambda_(lambda) {
    if (lattice_size < 2) throw UsageError("double well: lattice size must be >= 2");
    if (spacing <= 0.0) throw UsageError("double well: spacing must be > 0");
    if (lambda < 0.0) throw UsageError("double well: lambda must be >= 0");
    shift_ = Matrix::Zero(lattice_size, lattice_size);
    for (int t = 0; t < lattice_size; ++t) shift_(t, (t + 1) % lattice_size) = 1.0;
    zero_bias_ = Matrix::Zero(lattice_size, 1);
  }

  int lattice_size() const { return lattice_size_; }
  double spacing() const { return spacing_; }
  double m0() const { return m0_; }
  double mu2() const { return mu2_; }
  double lambda() const { return lambda_; }

  bool even() const override { return true; }

  Var record_action(Tape& tape, Var x) const override {
    if (tape.value(x).rows() != lattice_size_) {
      throw UsageError("double well: configuration length does not match lattice size");
    }
    Var rolled = tape.affine(tape.constant(shift_), x, tape.constant(zero_bias_));
    Var dx = tape.sub(rolled, x);
    Var kin = tape.scale(tape.colsum(tape.square(dx)), spacing_ * m0_ / 2.0);
    Var x2 = tape.square(x);
    Var v2 = tape.scale(tape.colsum(x2), spacing_ * m0_ * mu2_ / 2.0);
    Var v4 = tape.scale(tape.colsum(tape.square(x2)), spacing_ * lambda_ / 4.0);
    return tape.add(tape.add(kin, v2), v4);
  }

 private:
  int lattice_size_;
  double spacing_, m0_, mu2_, lambda_;
  Matrix shift_;
  Matrix zero_bias_;
};

/// Diagonal Gaussian oracle target, S(x) = sum_i (x_i - mu_i)^2 / (2 sigma_i^2)
/// with the normalization constant dropped.
class GaussianTarget : public Target {
 public:
  GaussianTarget(const Vector& mean, const Vector& stddev) : mean_(mean) {
    if (mean.size() != stddev.size()) throw UsageError("gaussian target: size mismatch");
    if ((stddev.array() <= 0.0).any()) throw UsageError("gaussian target: stddev must be > 0");
    inv2var_ = (0.5 / stddev.array().square()).matrix();
    even_ = mean.isZero(0.0);
  }

  bool even() const override { return even_; }

  Var record_action(Tape& tape, Var x) const override {
    Var d = tape.sub(x, tape.constant(mean_));
    return tape.colsum(tape.mul(tape.square(d), tape.constant(inv2var_)));
  }

 private:
  Vector mean_;
  Vector inv2var_;
  bool even_;
};

/// Frozen-model target: S(x) = -log q_frozen(x). The frozen parameters are
/// bound as const leaves, so gradients flow through x but never into a live
/// model's parameters. Realizes the perfect-approximation limit exactly when
/// the live model equals the snapshot.
template <class ModelT>
class SelfTarget : public Target {
 public:
  explicit SelfTarget(const ModelT& model) : frozen_(model) {}

  const ModelT& frozen() const { return frozen_; }

  Var record_action(Tape& tape, Var x) const override {
    auto bp = frozen_.bind(tape, /*requires_grad=*/false);
    Var logq = frozen_.record_log_prob(tape, bp, x);
    return tape.neg(logq);
  }

 private:
  ModelT frozen_;
};

template <class ModelT>
std::shared_ptr<SelfTarget<ModelT>> self_target(const ModelT& model) {
  return std::make_shared<SelfTarget<ModelT>>(model);
}

inline std::shared_ptr<GaussianTarget> gaussian_target(const Vector& mean, const Vector& stddev) {
  return std::make_shared<GaussianTarget>(mean, stddev);
}

}  // namespace flowvi
