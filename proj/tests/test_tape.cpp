#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "flowvi/rng.hpp"
#include "flowvi/tape.hpp"
#include "test_util.hpp"

using namespace flowvi;
using testutil::bit_equal;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

double scalar_backward(Tape& tape, Var out, Var wrt) {
  Adjoints adj = tape.backward(out);
  return adj.of(wrt, 1, 1)(0, 0);
}

/// Central finite differences of a scalar function of one scalar leaf.
template <class Fn>
double fd_scalar(Fn&& fn, double x, double h = 1e-6) {
  return (fn(x + h) - fn(x - h)) / (2.0 * h);
}

}  // namespace

TEST_CASE("elementary records produce the expected values") {
  Tape tape;
  Var a = tape.leaf(scalar(2.0), true);
  Var b = tape.leaf(scalar(3.0), true);
  CHECK(tape.value(tape.add(a, b))(0, 0) == 5.0);
  CHECK(tape.value(tape.mul(a, b))(0, 0) == 6.0);
  Var zero = tape.leaf(scalar(0.0), true);
  CHECK(tape.value(tape.tanh(zero))(0, 0) == 0.0);
  CHECK(scalar_backward(tape, tape.tanh(zero), zero) == 1.0);  // tanh'(0) = 1
}

TEST_CASE("recording a non-finite value raises NumericError") {
  Tape tape;
  Var big = tape.leaf(scalar(1e308), true);
  CHECK_THROWS_AS(tape.exp(big), NumericError);
  CHECK_THROWS_AS(tape.leaf(scalar(std::nan("")), true), NumericError);
}

TEST_CASE("cross-tape inputs raise UsageError") {
  Tape t1, t2;
  Var a = t1.leaf(scalar(1.0), true);
  Var b = t2.leaf(scalar(1.0), true);
  CHECK_THROWS_AS(t1.add(a, b), UsageError);
}

TEST_CASE("backward of x*y gives the partner values") {
  Tape tape;
  Var x = tape.leaf(scalar(2.0), true);
  Var y = tape.leaf(scalar(3.0), true);
  Var f = tape.mul(x, y);
  Adjoints adj = tape.backward(f);
  CHECK(adj.of(x, 1, 1)(0, 0) == 3.0);
  CHECK(adj.of(y, 1, 1)(0, 0) == 2.0);
}

TEST_CASE("log(exp(x)) differentiates to one") {
  Tape tape;
  Var x = tape.leaf(scalar(1.7), true);
  Var f = tape.log(tape.exp(x));
  CHECK_THAT(scalar_backward(tape, f, x), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("tanh(2x) matches the finite-difference oracle") {
  auto fn = [](double v) { return std::tanh(2.0 * v); };
  const double fd = fd_scalar(fn, 0.5);
  Tape tape;
  Var x = tape.leaf(scalar(0.5), true);
  Var f = tape.tanh(tape.scale(x, 2.0));
  const double ad = scalar_backward(tape, f, x);
  CHECK_THAT(ad, Catch::Matchers::WithinRel(fd, 1e-6));
  // closed form 2 (1 - tanh^2(1))
  CHECK_THAT(ad, Catch::Matchers::WithinAbs(2.0 * (1.0 - std::pow(std::tanh(1.0), 2)), 1e-14));
}

TEST_CASE("stop_gradient blocks the stopped branch only") {
  SECTION("f = stop(x) * x") {
    Tape tape;
    Var x = tape.leaf(scalar(3.0), true);
    Var f = tape.mul(tape.stop_gradient(x), x);
    CHECK(scalar_backward(tape, f, x) == 3.0);
  }
  SECTION("f = stop(x)") {
    Tape tape;
    Var x = tape.leaf(scalar(3.0), true);
    Var f = tape.stop_gradient(x);
    Adjoints adj = tape.backward(f);
    CHECK_FALSE(adj.has(x));
    CHECK(adj.of(x, 1, 1)(0, 0) == 0.0);
  }
  SECTION("f = stop(x^2) + x") {
    Tape tape;
    Var x = tape.leaf(scalar(2.0), true);
    Var f = tape.add(tape.stop_gradient(tape.square(x)), x);
    CHECK(scalar_backward(tape, f, x) == 1.0);
  }
}

TEST_CASE("stop_gradient is value-transparent") {
  RngStream rng(7);
  Matrix m(3, 4);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  Tape tape;
  Var a = tape.leaf(m, true);
  Var direct = tape.tanh(tape.scale(a, 1.3));
  Var via_stop = tape.tanh(tape.scale(tape.stop_gradient(a), 1.3));
  CHECK(bit_equal(tape.value(direct), tape.value(via_stop)));
}

TEST_CASE("every elementary op matches central finite differences") {
  RngStream rng(42);
  const double h = 1e-6;
  const double tol = 1e-6;

  // unary ops on values in a range where each op is smooth and defined
  struct UnaryCase {
    const char* name;
    std::function<Var(Tape&, Var)> op;
    std::function<double(double)> ref;
    double lo, hi;
  };
  std::vector<UnaryCase> unary = {
      {"neg", [](Tape& t, Var a) { return t.neg(a); }, [](double v) { return -v; }, -2, 2},
      {"exp", [](Tape& t, Var a) { return t.exp(a); }, [](double v) { return std::exp(v); }, -2, 2},
      {"log", [](Tape& t, Var a) { return t.log(a); }, [](double v) { return std::log(v); }, 0.1, 2},
      {"tanh", [](Tape& t, Var a) { return t.tanh(a); }, [](double v) { return std::tanh(v); }, -2, 2},
      {"square", [](Tape& t, Var a) { return t.square(a); }, [](double v) { return v * v; }, -2, 2},
  };
  for (const auto& c : unary) {
    INFO(c.name);
    for (int rep = 0; rep < 20; ++rep) {
      double v = c.lo + (c.hi - c.lo) * rng.uniform();
      Tape tape;
      Var x = tape.leaf(scalar(v), true);
      double ad = scalar_backward(tape, c.op(tape, x), x);
      double fd = (c.ref(v + h) - c.ref(v - h)) / (2 * h);
      CHECK_THAT(ad, Catch::Matchers::WithinRel(fd, tol) || Catch::Matchers::WithinAbs(fd, 1e-9));
    }
  }

  // binary ops, including the broadcast paths
  for (int rep = 0; rep < 20; ++rep) {
    double av = -2.0 + 4.0 * rng.uniform();
    double bv = 0.5 + 1.5 * rng.uniform();  // keep divisors away from zero
    struct BinaryCase {
      const char* name;
      std::function<Var(Tape&, Var, Var)> op;
      std::function<double(double, double)> ref;
    };
    std::vector<BinaryCase> binary = {
        {"add", [](Tape& t, Var a, Var b) { return t.add(a, b); },
         [](double a, double b) { return a + b; }},
        {"sub", [](Tape& t, Var a, Var b) { return t.sub(a, b); },
         [](double a, double b) { return a - b; }},
        {"mul", [](Tape& t, Var a, Var b) { return t.mul(a, b); },
         [](double a, double b) { return a * b; }},
        {"div", [](Tape& t, Var a, Var b) { return t.div(a, b); },
         [](double a, double b) { return a / b; }},
    };
    for (const auto& c : binary) {
      INFO(c.name);
      Tape tape;
      Var a = tape.leaf(scalar(av), true);
      Var b = tape.leaf(scalar(bv), true);
      Var f = c.op(tape, a, b);
      Adjoints adj = tape.backward(f);
      double fd_a = (c.ref(av + h, bv) - c.ref(av - h, bv)) / (2 * h);
      double fd_b = (c.ref(av, bv + h) - c.ref(av, bv - h)) / (2 * h);
      CHECK_THAT(adj.of(a, 1, 1)(0, 0),
                 Catch::Matchers::WithinRel(fd_a, tol) || Catch::Matchers::WithinAbs(fd_a, 1e-9));
      CHECK_THAT(adj.of(b, 1, 1)(0, 0),
                 Catch::Matchers::WithinRel(fd_b, tol) || Catch::Matchers::WithinAbs(fd_b, 1e-9));
    }
  }
}

TEST_CASE("affine backward matches finite differences") {
  RngStream rng(3);
  Matrix w(3, 2), x(2, 4), b(3, 1);
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (int i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  // scalar head: sum(tanh(affine)) exercises a non-trivial downstream factor
  auto loss_of = [&](const Matrix& wv, const Matrix& xv, const Matrix& bv) {
    Tape tape;
    Var f = tape.sum(tape.tanh(tape.affine(tape.constant(wv), tape.constant(xv),
                                           tape.constant(bv))));
    return tape.value(f)(0, 0);
  };
  Tape tape;
  Var wl = tape.leaf(w, true), xl = tape.leaf(x, true), bl = tape.leaf(b, true);
  Adjoints adj = tape.backward(tape.sum(tape.tanh(tape.affine(wl, xl, bl))));
  const double h = 1e-6;
  auto check_block = [&](Matrix m, const Var& leaf, auto rebuild) {
    Matrix g = adj.of(leaf, m.rows(), m.cols());
    for (int i = 0; i < m.size(); ++i) {
      Matrix mp = m, mm = m;
      mp.data()[i] += h;
      mm.data()[i] -= h;
      double fd = (rebuild(mp) - rebuild(mm)) / (2 * h);
      CHECK_THAT(g.data()[i],
                 Catch::Matchers::WithinRel(fd, 1e-6) || Catch::Matchers::WithinAbs(fd, 1e-9));
    }
  };
  check_block(w, wl, [&](const Matrix& m) { return loss_of(m, x, b); });
  check_block(x, xl, [&](const Matrix& m) { return loss_of(w, m, b); });
  check_block(b, bl, [&](const Matrix& m) { return loss_of(w, x, m); });
}

TEST_CASE("reductions and dot behave") {
  Tape tape;
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  Var a = tape.leaf(m, true);
  Var cs = tape.colsum(a);
  Matrix expect(1, 3);
  expect << 5.0, 7.0, 9.0;
  CHECK(bit_equal(tape.value(cs), expect));
  CHECK(tape.value(tape.sum(a))(0, 0) == 21.0);
  Var b = tape.constant(Matrix::Ones(2, 3));
  CHECK(tape.value(tape.dot(a, b))(0, 0) == 21.0);
  Adjoints adj = tape.backward(tape.dot(a, a));
  CHECK(bit_equal(adj.of(a, 2, 3), 2.0 * m));
}

TEST_CASE("backward is linear in the output") {
  RngStream rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    double xv = -2.0 + 4.0 * rng.uniform();
    double alpha = -2.0 + 4.0 * rng.uniform();
    double beta = -2.0 + 4.0 * rng.uniform();
    auto build = [&](Tape& tape, Var x) {
      Var f = tape.tanh(tape.mul(x, x));
      Var g = tape.exp(tape.scale(x, 0.3));
      return std::pair(f, g);
    };
    Tape t1;
    Var x1 = t1.leaf(scalar(xv), true);
    auto [f1, g1] = build(t1, x1);
    double df = scalar_backward(t1, f1, x1);
    Tape t2;
    Var x2 = t2.leaf(scalar(xv), true);
    auto [f2, g2] = build(t2, x2);
    double dg = scalar_backward(t2, g2, x2);
    Tape t3;
    Var x3 = t3.leaf(scalar(xv), true);
    auto [f3, g3] = build(t3, x3);
    Var combo = t3.add(t3.scale(f3, alpha), t3.scale(g3, beta));
    double dc = scalar_backward(t3, combo, x3);
    CHECK_THAT(dc, Catch::Matchers::WithinRel(alpha * df + beta * dg, 1e-12));
  }
}

TEST_CASE("memory meter tracks tape and adjoint storage with a high-water mark") {
  MemoryMeter meter;
  {
    Tape tape(&meter);
    Var a = tape.leaf(Matrix::Ones(8, 8), true);
    Var b = tape.square(a);
    CHECK(meter.current() > 2 * 64 * sizeof(double));
    Adjoints adj = tape.backward(tape.sum(b));
    CHECK(meter.peak() >= meter.current());
  }
  CHECK(meter.current() == 0);
  CHECK(meter.peak() > 0);
}

TEST_CASE("backward rejects non-scalar outputs and foreign vars") {
  Tape tape;
  Var a = tape.leaf(Matrix::Ones(2, 2), true);
  CHECK_THROWS_AS(tape.backward(a), UsageError);
  Tape other;
  Var b = other.leaf(scalar(1.0), true);
  CHECK_THROWS_AS(tape.value(b), UsageError);
}
