#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowvi/flow.hpp"
#include "test_util.hpp"

using namespace flowvi;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::random_matrix;

namespace {

FlowConfig small_cfg(int T, int layers, int width = 8, double stddev = 10.0) {
  FlowConfig cfg;
  cfg.lattice_size = T;
  cfg.coupling_layers = layers;
  cfg.hidden_layers = 2;
  cfg.hidden_width = width;
  cfg.base_stddev = stddev;
  cfg.init_seed = 99;
  return cfg;
}

void perturb(RealNvpFlow& flow, double scale, std::uint64_t seed) {
  RngStream rng(seed);
  for (Eigen::Index i = 0; i < flow.params().size(); ++i) {
    flow.params()[i] += scale * rng.normal();
  }
}

}  // namespace

TEST_CASE("freshly initialized flow is the identity with zero log-det") {
  RealNvpFlow flow(small_cfg(8, 4));
  RngStream rng(1);
  Matrix z = flow.sample_base(rng, 16);
  Matrix x;
  RowVector log_det;
  flow.forward_values(z, x, log_det);
  CHECK(bit_equal(x, z));
  CHECK(log_det.cwiseAbs().maxCoeff() == 0.0);
  Matrix zback;
  RowVector ldi;
  flow.inverse_values(x, zback, ldi);
  CHECK(bit_equal(zback, z));
  CHECK(ldi.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single constant-scale coupling layer matches the hand-derived map") {
  FlowConfig cfg = small_cfg(2, 1, 4);
  cfg.hidden_layers = 1;
  RealNvpFlow flow(cfg);
  // Zero final weights leave s and t equal to the output biases; pick the
  // scale-net bias so the clamped output is exactly reproducible.
  const double s_bias = 0.3, t0 = -1.25;
  const double s0 = cfg.scale_clamp * std::tanh(s_bias);  // effective scale
  auto& layout = flow.layout();
  const std::size_t bpn = flow.blocks_per_net();
  const auto& s_out_bias = layout[2 * cfg.hidden_layers + 1];
  const auto& t_out_bias = layout[bpn + 2 * cfg.hidden_layers + 1];
  for (Eigen::Index i = 0; i < s_out_bias.rows; ++i) {
    flow.params()[s_out_bias.offset + i] = s_bias;
    flow.params()[t_out_bias.offset + i] = t0;
  }
  Matrix z(2, 3);
  z << 0.4, -1.0, 2.0, 1.1, 0.0, -0.7;
  Matrix x;
  RowVector log_det;
  flow.forward_values(z, x, log_det);
  for (int j = 0; j < 3; ++j) {
    CHECK(x(0, j) == z(0, j));  // masked site passes through (mask = [1, 0])
    CHECK_THAT(x(1, j), Catch::Matchers::WithinRel(z(1, j) * std::exp(s0) + t0, 1e-14) ||
                            Catch::Matchers::WithinAbs(z(1, j) * std::exp(s0) + t0, 1e-14));
    CHECK_THAT(log_det(j), Catch::Matchers::WithinAbs(s0, 1e-14));
  }
  // algebraic inverse: z1 = (x1 - t0) e^{-s0}
  Matrix zb;
  RowVector ldi;
  flow.inverse_values(x, zb, ldi);
  for (int j = 0; j < 3; ++j) {
    CHECK_THAT(zb(1, j), Catch::Matchers::WithinAbs((x(1, j) - t0) * std::exp(-s0), 1e-12));
    CHECK_THAT(ldi(j), Catch::Matchers::WithinAbs(-s0, 1e-14));
  }
  // change of variables by hand: log q(x) = log q_Z(z) - s0
  RowVector logq = flow.log_prob_values(x);
  RowVector base = flow.base_logprob_values(z);
  CHECK(max_abs_diff(logq, base.array() - s0) < 1e-12);
}

TEST_CASE("bijectivity round-trip stays below 1e-10 on a deep perturbed flow") {
  RealNvpFlow flow(small_cfg(8, 8));
  perturb(flow, 0.1, 5);
  RngStream rng(2);
  Matrix z = flow.sample_base(rng, 64);
  Matrix x, zb;
  RowVector ld, ldi;
  flow.forward_values(z, x, ld);
  flow.inverse_values(x, zb, ldi);
  CHECK(max_abs_diff(z, zb) < 1e-10);
  CHECK((ld + ldi).cwiseAbs().maxCoeff() < 1e-10);  // Jacobian inverse identity
}

TEST_CASE("taped passes agree with the plain evaluation bit for bit") {
  RealNvpFlow flow(small_cfg(6, 3));
  perturb(flow, 0.2, 8);
  RngStream rng(3);
  Matrix z = flow.sample_base(rng, 5);
  Matrix x;
  RowVector ld;
  flow.forward_values(z, x, ld);
  Tape tape;
  auto bp = flow.bind(tape, true);
  auto [xv, ldv] = flow.record_forward(tape, bp, tape.constant(z));
  CHECK(bit_equal(tape.value(xv), x));
  CHECK(bit_equal(tape.value(ldv), ld));
  auto [zv, ldiv] = flow.record_inverse(tape, bp, tape.constant(x));
  Matrix zb;
  RowVector ldi;
  flow.inverse_values(x, zb, ldi);
  CHECK(bit_equal(tape.value(zv), zb));
  CHECK(bit_equal(tape.value(ldiv), ldi));
}

TEST_CASE("change-of-variables consistency along the forward route") {
  RealNvpFlow flow(small_cfg(8, 4));
  perturb(flow, 0.15, 21);
  RngStream rng(4);
  Matrix z = flow.sample_base(rng, 32);
  Matrix x;
  RowVector ld;
  flow.forward_values(z, x, ld);
  RowVector lhs = flow.log_prob_values(x);
  RowVector rhs = flow.base_logprob_values(z) - ld;
  CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("identity flow log-density at the origin is the Gaussian constant") {
  const int T = 8;
  const double sigma = 10.0;
  RealNvpFlow flow(small_cfg(T, 4, 8, sigma));
  Matrix origin = Matrix::Zero(T, 1);
  const double expect = -0.5 * T * std::log(2.0 * M_PI * sigma * sigma);
  CHECK_THAT(flow.log_prob_values(origin)(0), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("flow density integrates to one (grid quadrature oracle)") {
  SECTION("T = 1 flow on [-50 sigma, 50 sigma]") {
    FlowConfig cfg = small_cfg(1, 2, 4, 1.0);
    RealNvpFlow flow(cfg);
    perturb(flow, 0.2, 31);  // T=1 couplings stay the identity; params are inert
    const int n = 20001;
    const double lo = -50.0, hi = 50.0;
    const double h = (hi - lo) / (n - 1);
    Matrix grid(1, n);
    for (int i = 0; i < n; ++i) grid(0, i) = lo + h * i;
    RowVector logq = flow.log_prob_values(grid);
    double integral = 0.0;
    for (int i = 0; i < n; ++i) {
      const double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;  // trapezoid ends
      integral += w * std::exp(logq(i));
    }
    integral *= h;
    CHECK_THAT(integral, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
  SECTION("perturbed T = 2 flow, 2-D trapezoid") {
    FlowConfig cfg = small_cfg(2, 2, 8, 1.0);
    RealNvpFlow flow(cfg);
    perturb(flow, 0.1, 32);
    const int n = 1601;
    const double lo = -80.0, hi = 80.0;
    const double h = (hi - lo) / (n - 1);
    double integral = 0.0;
    Matrix chunk(2, n);
    for (int i = 0; i < n; ++i) {
      const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      for (int j = 0; j < n; ++j) {
        chunk(0, j) = lo + h * i;
        chunk(1, j) = lo + h * j;
      }
      RowVector logq = flow.log_prob_values(chunk);
      double row = 0.0;
      for (int j = 0; j < n; ++j) {
        const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
        row += wj * std::exp(logq(j));
      }
      integral += wi * row;
    }
    integral *= h * h;
    CHECK_THAT(integral, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("path gradient of log q matches the frozen-density finite-difference oracle") {
  RealNvpFlow flow(small_cfg(4, 2, 6));
  perturb(flow, 0.15, 44);
  RngStream rng(5);
  Matrix z = flow.sample_base(rng, 1);
  Vector ad = flow.path_grad_logq(z);
  // oracle: perturb theta inside g only, evaluate the density at fixed theta
  const double h = 1e-5;
  RealNvpFlow probe = flow;
  Vector fd(flow.param_count());
  for (Eigen::Index k = 0; k < flow.param_count(); ++k) {
    Vector theta = flow.params();
    theta[k] += h;
    probe.set_params(theta);
    Matrix xp;
    RowVector ldp;
    probe.forward_values(z, xp, ldp);
    theta[k] -= 2 * h;
    probe.set_params(theta);
    Matrix xm;
    RowVector ldm;
    probe.forward_values(z, xm, ldm);
    fd[k] = (flow.log_prob_values(xp)(0) - flow.log_prob_values(xm)(0)) / (2 * h);
  }
  CHECK((ad - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-4);
}

TEST_CASE("total gradient of log q splits into path plus score per sample") {
  RealNvpFlow flow(small_cfg(6, 3, 8));
  perturb(flow, 0.2, 51);
  RngStream rng(6);
  for (int rep = 0; rep < 4; ++rep) {
    Matrix z = flow.sample_base(rng, 1);
    // total: d/dtheta log q(g(z)) = -d/dtheta log_det_forward (z fixed)
    Vector total;
    {
      Tape tape;
      auto bp = flow.bind(tape, true);
      auto [x, ld] = flow.record_forward(tape, bp, tape.constant(z));
      (void)x;
      Adjoints adj = tape.backward(tape.scale(tape.sum(ld), -1.0));
      total = flow.grad_of(adj, bp);
    }
    Vector path = flow.path_grad_logq(z);
    // score: d/dtheta log q(x) at fixed x
    Vector score;
    {
      Matrix x;
      RowVector ld;
      flow.forward_values(z, x, ld);
      Tape tape;
      auto bp = flow.bind(tape, true);
      Var logq = flow.record_log_prob(tape, bp, tape.constant(x));
      Adjoints adj = tape.backward(tape.sum(logq));
      score = flow.grad_of(adj, bp);
    }
    CHECK((total - path - score).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("parameter vector round-trips and the count matches the architecture") {
  FlowConfig cfg = small_cfg(8, 6, 16);
  cfg.hidden_layers = 3;
  RealNvpFlow flow(cfg);
  // per net: (T->W) + 2x(W->W) + (W->T) affines with biases
  const Eigen::Index per_net = (16 * 8 + 16) + 2 * (16 * 16 + 16) + (8 * 16 + 8);
  CHECK(flow.param_count() == 6 * 2 * per_net);
  perturb(flow, 0.3, 60);
  Vector saved = flow.params();
  RealNvpFlow other(cfg);
  other.set_params(saved);
  CHECK(bit_equal(other.params(), saved));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  FlowConfig cfg = small_cfg(4, 3, 8);
  RealNvpFlow flow(cfg);
  perturb(flow, 0.25, 70);
  auto dir = testutil::temp_dir("flow_ckpt");
  const std::string path = dir + "/model.ckpt";
  flow.save(path);
  RealNvpFlow loaded = RealNvpFlow::load(path);
  CHECK(loaded.config().lattice_size == cfg.lattice_size);
  CHECK(loaded.config().coupling_layers == cfg.coupling_layers);
  CHECK(loaded.config().base_stddev == cfg.base_stddev);
  CHECK(loaded.config().scale_clamp == cfg.scale_clamp);
  CHECK(loaded.config().init_seed == cfg.init_seed);
  CHECK(bit_equal(loaded.params(), flow.params()));
  // corrupt header is a ParseError
  {
    std::ofstream os(dir + "/bad.ckpt");
    os << "NOT A CHECKPOINT\n";
  }
  CHECK_THROWS_AS(RealNvpFlow::load(dir + "/bad.ckpt"), ParseError);
}

TEST_CASE("masks alternate so every site is transformed every two layers") {
  RealNvpFlow flow(small_cfg(6, 2, 4));
  perturb(flow, 0.3, 80);
  RngStream rng(9);
  Matrix z = flow.sample_base(rng, 1);
  Matrix x;
  RowVector ld;
  flow.forward_values(z, x, ld);
  for (int t = 0; t < 6; ++t) CHECK(x(t, 0) != z(t, 0));
}
