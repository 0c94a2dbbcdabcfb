#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowvi/flow.hpp"
#include "flowvi/sampling.hpp"
#include "flowvi/target.hpp"
#include "test_util.hpp"

using namespace flowvi;
using testutil::max_abs_diff;

TEST_CASE("double-well action on simple configurations") {
  DoubleWellAction dw(8, 1.0, 2.75, -1.0, 1.0);
  SECTION("zero path has zero action") {
    CHECK(dw.action_values(Matrix::Zero(8, 1))(0) == 0.0);
  }
  SECTION("constant path x = 1: S = 8 (m0 mu2 / 2 + lambda / 4) = -9") {
    Matrix x = Matrix::Ones(8, 1);
    CHECK_THAT(dw.action_values(x)(0), Catch::Matchers::WithinAbs(-9.0, 1e-12));
  }
  SECTION("potential minima sit at +-sqrt(-m0 mu2 / lambda)") {
    const double xstar = std::sqrt(2.75);
    CHECK_THAT(xstar, Catch::Matchers::WithinAbs(1.65831, 1e-5));
    Matrix x = Matrix::Constant(8, 1, xstar);
    // constant path: kinetic term zero, V'(x*) = 0, so the gradient vanishes
    CHECK(dw.action_grad_values(x).cwiseAbs().maxCoeff() < 1e-12);
    Matrix xm = Matrix::Constant(8, 1, -xstar);
    CHECK(dw.action_grad_values(xm).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("gradient at the origin vanishes") {
    CHECK(dw.action_grad_values(Matrix::Zero(8, 1)).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("length mismatch is a usage error") {
    CHECK_THROWS_AS(dw.action_values(Matrix::Zero(4, 1)), UsageError);
  }
}

TEST_CASE("double-well gradient matches finite differences") {
  DoubleWellAction dw(8, 1.0, 2.75, -1.0, 1.0);
  RngStream rng(12);
  Matrix x = testutil::random_matrix(8, 3, rng, 1.5);
  Matrix g = dw.action_grad_values(x);
  const double h = 1e-6;
  for (int j = 0; j < x.cols(); ++j) {
    for (int i = 0; i < 8; ++i) {
      Matrix xp = x, xm = x;
      xp(i, j) += h;
      xm(i, j) -= h;
      const double fd = (dw.action_values(xp.col(j))(0) - dw.action_values(xm.col(j))(0)) / (2 * h);
      CHECK_THAT(g(i, j), Catch::Matchers::WithinRel(fd, 1e-6) ||
                              Catch::Matchers::WithinAbs(fd, 1e-10));
    }
  }
}

TEST_CASE("double-well symmetries") {
  DoubleWellAction dw(6, 1.0, 3.0, -1.0, 1.0);
  RngStream rng(13);
  Matrix x = testutil::random_matrix(6, 4, rng, 2.0);
  SECTION("parity: S(-x) = S(x) bit for bit") {
    CHECK(testutil::bit_equal(dw.action_values(-x), dw.action_values(x)));
    CHECK(dw.even());
  }
  SECTION("translation covariance under cyclic shift") {
    Matrix shifted(6, 4);
    for (int t = 0; t < 6; ++t) shifted.row(t) = x.row((t + 1) % 6);
    // identical term sets, summed in rotated order; equality holds to rounding
    RowVector a = dw.action_values(x), b = dw.action_values(shifted);
    for (int j = 0; j < 4; ++j) {
      CHECK_THAT(b(j), Catch::Matchers::WithinRel(a(j), 1e-13) ||
                           Catch::Matchers::WithinAbs(a(j), 1e-13));
    }
  }
}

TEST_CASE("gaussian oracle target") {
  Vector mean(2), stddev(2);
  mean << 0.5, -1.0;
  stddev << 1.0, 2.0;
  GaussianTarget g(mean, stddev);
  SECTION("zero action at the mean") {
    CHECK(g.action_values(mean)(0) == 0.0);
  }
  SECTION("1-D unit sigma: S(2) = 2") {
    GaussianTarget g1(Vector::Zero(1), Vector::Ones(1));
    CHECK_THAT(g1.action_values(Matrix::Constant(1, 1, 2.0))(0),
               Catch::Matchers::WithinAbs(2.0, 1e-15));
  }
  SECTION("gradient one sigma from the mean is 1/sigma") {
    Matrix x = mean;
    x(0, 0) += stddev(0);
    x(1, 0) += stddev(1);
    Matrix grad = g.action_grad_values(x);
    CHECK_THAT(grad(0, 0), Catch::Matchers::WithinAbs(1.0 / stddev(0), 1e-12));
    CHECK_THAT(grad(1, 0), Catch::Matchers::WithinAbs(1.0 / stddev(1), 1e-12));
  }
  SECTION("evenness only for centered targets") {
    CHECK_FALSE(g.even());
    CHECK(GaussianTarget(Vector::Zero(2), Vector::Ones(2)).even());
  }
  SECTION("stddev must be positive") {
    Vector bad(1);
    bad << 0.0;
    CHECK_THROWS_AS(GaussianTarget(Vector::Zero(1), bad), UsageError);
  }
}

TEST_CASE("self-target realizes the perfect-approximation limit") {
  FlowConfig cfg;
  cfg.lattice_size = 4;
  cfg.coupling_layers = 2;
  cfg.hidden_layers = 2;
  cfg.hidden_width = 8;
  cfg.init_seed = 7;
  RealNvpFlow flow(cfg);
  RngStream prng(55);
  for (Eigen::Index i = 0; i < flow.params().size(); ++i) flow.params()[i] += 0.2 * prng.normal();
  auto st = self_target(flow);

  RngStream rng(14);
  auto batch = draw_weighted_batch(flow, *st, 256, rng);
  SECTION("importance weights are one for every sample") {
    CHECK(batch.log_wtilde.cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("reverse ESS is one") {
    CHECK_THAT(reverse_ess(batch.log_wtilde), Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
  SECTION("gradients flow through x but never into live parameters") {
    Tape tape;
    Var x = tape.leaf(batch.x.leftCols(3), true);
    Var s = st->record_action(tape, x);
    Adjoints adj = tape.backward(tape.sum(s));
    CHECK(adj.has(x));
    // dS/dx = -dlog q/dx: compare against the frozen flow's own density grad
    Tape tape2;
    auto bp = flow.bind(tape2, false);
    Var x2 = tape2.leaf(batch.x.leftCols(3), true);
    Var logq = flow.record_log_prob(tape2, bp, x2);
    Adjoints adj2 = tape2.backward(tape2.sum(logq));
    CHECK(max_abs_diff(adj.of(x, 4, 3), -adj2.of(x2, 4, 3)) < 1e-12);
  }
}

TEST_CASE("targets report action values consistently with their taped recording") {
  DoubleWellAction dw(4, 1.0, 3.25, -1.0, 1.0);
  RngStream rng(15);
  Matrix x = testutil::random_matrix(4, 8, rng, 1.2);
  Tape tape;
  Var s = dw.record_action(tape, tape.constant(x));
  CHECK(testutil::bit_equal(tape.value(s), dw.action_values(x)));
}
