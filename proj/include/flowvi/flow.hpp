#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "flowvi/rng.hpp"
#include "flowvi/tape.hpp"

namespace flowvi {

struct FlowConfig {
  int lattice_size = 8;
  int coupling_layers = 8;
  int hidden_layers = 3;     // hidden affine layers per conditioner net
  int hidden_width = 200;
  double base_stddev = 10.0;
  double scale_clamp = 5.0;  // s = clamp * tanh(raw) keeps log-det bounded
  std::uint64_t init_seed = 1;
};

namespace detail {

struct ParamBlock {
  Eigen::Index offset;
  Eigen::Index rows;
  Eigen::Index cols;
};

inline void write_f64_array(std::ostream& os, const double* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_f64_array(std::istream& is, double* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw ParseError("checkpoint: truncated parameter array");
}

}  // namespace detail

/// RealNVP flow on a 1-D periodic lattice. Each coupling layer conditions
/// on the masked half of the sites (even/odd alternating) and applies
/// x = z * exp(s) + t on the complement. Two separate tanh MLPs produce the
/// per-site scale s and shift t. The final layer of each net starts at zero
/// so a fresh model is the identity map and q equals the wide Gaussian base.
class RealNvpFlow {
 public:
  explicit RealNvpFlow(const FlowConfig& cfg) : cfg_(cfg) {
    if (cfg.lattice_size < 1 || cfg.coupling_layers < 1 || cfg.hidden_layers < 1 ||
        cfg.hidden_width < 1) {
      throw UsageError("flow: architecture sizes must be >= 1");
    }
    if (cfg.base_stddev <= 0.0) throw UsageError("flow: base stddev must be > 0");
    build_layout();
    init_params();
    build_masks();
  }

  int dim() const { return cfg_.lattice_size; }
  Eigen::Index param_count() const { return theta_.size(); }
  const FlowConfig& config() const { return cfg_; }

  /// Layout descriptor: per coupling layer, the scale net then the shift net,
  /// each as [W, b] pairs for every affine stage (hidden stages first, output
  /// stage last). Offsets index into the flat parameter vector.
  const std::vector<detail::ParamBlock>& layout() const { return layout_; }
  std::size_t blocks_per_net() const { return blocks_per_net_; }

  const Vector& params() const { return theta_; }
  Vector& params() { return theta_; }
  void set_params(const Vector& theta) {
    if (theta.size() != theta_.size()) throw UsageError("flow: parameter size mismatch");
    theta_ = theta;
  }

  // ---- plain (value-only) evaluation ------------------------------------

  /// x = g(z) for a batch of columns; also returns log|det dg/dz| per sample.
  void forward_values(const Matrix& z, Matrix& x, RowVector& log_det) const {
    x = z;
    log_det = RowVector::Zero(z.cols());
    for (int l = 0; l < cfg_.coupling_layers; ++l) {
      Matrix h = x.array().colwise() * mask_[l].col(0).array();
      Matrix s, t;
      conditioner_values(l, h, s, t);
      Matrix scaled = x.cwiseProduct(s.array().exp().matrix()) + t;
      x = (x.array().colwise() * mask_[l].col(0).array()).matrix() +
          (scaled.array().colwise() * inv_mask_[l].col(0).array()).matrix();
      log_det += (s.array().colwise() * inv_mask_[l].col(0).array()).colwise().sum().matrix();
    }
  }

  /// z = g^{-1}(x); log_det_inv = log|det dg^{-1}/dx| = -log_det(forward at z).
  void inverse_values(const Matrix& x, Matrix& z, RowVector& log_det_inv) const {
    z = x;
    log_det_inv = RowVector::Zero(x.cols());
    for (int l = cfg_.coupling_layers - 1; l >= 0; --l) {
      Matrix h = z.array().colwise() * mask_[l].col(0).array();
      Matrix s, t;
      conditioner_values(l, h, s, t);
      Matrix unscaled = (z - t).cwiseProduct((-s).array().exp().matrix());
      z = (z.array().colwise() * mask_[l].col(0).array()).matrix() +
          (unscaled.array().colwise() * inv_mask_[l].col(0).array()).matrix();
      log_det_inv -= (s.array().colwise() * inv_mask_[l].col(0).array()).colwise().sum().matrix();
    }
  }

  RowVector base_logprob_values(const Matrix& z) const {
    const double inv2var = -0.5 / (cfg_.base_stddev * cfg_.base_stddev);
    const double norm = -0.5 * dim() * std::log(2.0 * M_PI * cfg_.base_stddev * cfg_.base_stddev);
    return (z.array().square().colwise().sum() * inv2var + norm).matrix();
  }

  /// log q(x) = log q_Z(g^{-1}(x)) + log|det dg^{-1}/dx|.
  RowVector log_prob_values(const Matrix& x) const {
    Matrix z;
    RowVector log_det_inv;
    inverse_values(x, z, log_det_inv);
    return base_logprob_values(z) + log_det_inv;
  }

  Matrix sample_base(RngStream& rng, int n) const {
    Matrix z(dim(), n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < dim(); ++i) z(i, j) = cfg_.base_stddev * rng.normal();
    }
    return z;
  }

  // ---- taped recording ----------------------------------------------------

  struct BoundParams {
    std::vector<Var> leaves;  // one per ParamBlock, in layout order
    bool requires_grad = false;
  };

  BoundParams bind(Tape& tape, bool requires_grad) const {
    BoundParams bp;
    bp.requires_grad = requires_grad;
    bp.leaves.reserve(layout_.size());
    for (const auto& blk : layout_) {
      Matrix m = Eigen::Map<const Matrix>(theta_.data() + blk.offset, blk.rows, blk.cols);
      bp.leaves.push_back(tape.leaf(m, requires_grad));
    }
    return bp;
  }

  std::pair<Var, Var> record_forward(Tape& tape, const BoundParams& bp, Var z) const {
    Var x = z;
    Var log_det = tape.constant(Matrix::Zero(1, tape.value(z).cols()));
    for (int l = 0; l < cfg_.coupling_layers; ++l) {
      Var m = tape.constant(mask_[l]);
      Var im = tape.constant(inv_mask_[l]);
      Var h = tape.mul(x, m);
      auto [s, t] = record_conditioner(tape, bp, l, h);
      Var scaled = tape.add(tape.mul(x, tape.exp(s)), t);
      x = tape.add(tape.mul(x, m), tape.mul(scaled, im));
      log_det = tape.add(log_det, tape.colsum(tape.mul(s, im)));
    }
    return {x, log_det};
  }

  std::pair<Var, Var> record_inverse(Tape& tape, const BoundParams& bp, Var x) const {
    Var z = x;
    Var log_det_inv = tape.constant(Matrix::Zero(1, tape.value(x).cols()));
    for (int l = cfg_.coupling_layers - 1; l >= 0; --l) {
      Var m = tape.constant(mask_[l]);
      Var im = tape.constant(inv_mask_[l]);
      Var h = tape.mul(z, m);
      auto [s, t] = record_conditioner(tape, bp, l, h);
      Var unscaled = tape.mul(tape.sub(z, t), tape.exp(tape.neg(s)));
      z = tape.add(tape.mul(z, m), tape.mul(unscaled, im));
      log_det_inv = tape.sub(log_det_inv, tape.colsum(tape.mul(s, im)));
    }
    return {z, log_det_inv};
  }

  Var record_base_logprob(Tape& tape, Var z) const {
    const double inv2var = -0.5 / (cfg_.base_stddev * cfg_.base_stddev);
    const double norm = -0.5 * dim() * std::log(2.0 * M_PI * cfg_.base_stddev * cfg_.base_stddev);
    return tape.shift(tape.scale(tape.colsum(tape.square(z)), inv2var), norm);
  }

  /// log q(x) recorded via the inverse pass (Eq. of the induced density).
  Var record_log_prob(Tape& tape, const BoundParams& bp, Var x) const {
    auto [z, log_det_inv] = record_inverse(tape, bp, x);
    return tape.add(record_base_logprob(tape, z), log_det_inv);
  }

  /// Flatten the adjoints of the bound parameter leaves into the layout order.
  Vector grad_of(const Adjoints& adj, const BoundParams& bp) const {
    Vector g = Vector::Zero(theta_.size());
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      const auto& blk = layout_[i];
      Matrix gm = adj.of(bp.leaves[i], blk.rows, blk.cols);
      Eigen::Map<Matrix>(g.data() + blk.offset, blk.rows, blk.cols) = gm;
    }
    return g;
  }

  /// Path gradient of log q(g(z)) per the two-pass scheme: the sample is
  /// produced without gradients, the density gradient G = d log q(x')/dx' is
  /// taken through the inverse pass, and G is contracted against a fresh
  /// differentiable forward pass. Peak memory stays at one pass per phase.
  Vector path_grad_logq(const Matrix& z, MemoryMeter* meter = nullptr) const {
    Matrix xbar;
    RowVector ld;
    forward_values(z, xbar, ld);
    Matrix g_x;
    {
      Tape tape(meter);
      BoundParams bp = bind(tape, false);
      Var x_leaf = tape.leaf(xbar, true);
      Var logq = record_log_prob(tape, bp, x_leaf);
      Adjoints adj = tape.backward(tape.sum(logq));
      g_x = adj.of(x_leaf, xbar.rows(), xbar.cols());
    }
    Tape tape(meter);
    BoundParams bp = bind(tape, true);
    Var z_leaf = tape.leaf(z, false);
    auto [x, log_det] = record_forward(tape, bp, z_leaf);
    (void)log_det;
    Var loss = tape.dot(tape.constant(g_x), x);
    Adjoints adj = tape.backward(loss);
    Vector g = grad_of(adj, bp);
    g /= static_cast<double>(z.cols());
    return g;
  }

  // ---- checkpoint ---------------------------------------------------------

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot open checkpoint for writing: " + path);
    write_header(os);
    detail::write_f64_array(os, theta_.data(), static_cast<std::size_t>(theta_.size()));
    if (!os) throw UsageError("checkpoint write failed: " + path);
  }

  void write_header(std::ostream& os) const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "NFCKPT v1\n"
                  "lattice_size: %d\n"
                  "coupling_layers: %d\n"
                  "hidden_layers: %d\n"
                  "hidden_width: %d\n"
                  "base_stddev: %.17g\n"
                  "scale_clamp: %.17g\n"
                  "seed: %llu\n"
                  "param_count: %lld\n"
                  "END\n",
                  cfg_.lattice_size, cfg_.coupling_layers, cfg_.hidden_layers, cfg_.hidden_width,
                  cfg_.base_stddev, cfg_.scale_clamp,
                  static_cast<unsigned long long>(cfg_.init_seed),
                  static_cast<long long>(theta_.size()));
    os << buf;
  }

  static RealNvpFlow load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open checkpoint: " + path);
    RealNvpFlow flow = read_header(is);
    detail::read_f64_array(is, flow.theta_.data(), static_cast<std::size_t>(flow.theta_.size()));
    return flow;
  }

  static RealNvpFlow read_header(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "NFCKPT v1") {
      throw ParseError("checkpoint: bad magic line", 1);
    }
    FlowConfig cfg;
    long long param_count = -1;
    long lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line == "END") break;
      auto colon = line.find(": ");
      if (colon == std::string::npos) throw ParseError("checkpoint: malformed header", lineno);
      std::string key = line.substr(0, colon);
      std::string val = line.substr(colon + 2);
      if (key == "lattice_size") cfg.lattice_size = std::stoi(val);
      else if (key == "coupling_layers") cfg.coupling_layers = std::stoi(val);
      else if (key == "hidden_layers") cfg.hidden_layers = std::stoi(val);
      else if (key == "hidden_width") cfg.hidden_width = std::stoi(val);
      else if (key == "base_stddev") cfg.base_stddev = std::stod(val);
      else if (key == "scale_clamp") cfg.scale_clamp = std::stod(val);
      else if (key == "seed") cfg.init_seed = std::stoull(val);
      else if (key == "param_count") param_count = std::stoll(val);
      else throw ParseError("checkpoint: unknown header key '" + key + "'", lineno);
    }
    RealNvpFlow flow(cfg);
    if (param_count != flow.param_count()) {
      throw ParseError("checkpoint: param_count does not match architecture");
    }
    return flow;
  }

 private:
  // Layout per layer: scale net blocks then shift net blocks, each net
  // [W0,b0, ..., W_hidden, b_hidden, W_out, b_out].
  void build_layout() {
    const int T = cfg_.lattice_size;
    const int W = cfg_.hidden_width;
    Eigen::Index off = 0;
    auto push_net = [&]() {
      int in = T;
      for (int h = 0; h < cfg_.hidden_layers; ++h) {
        layout_.push_back({off, W, in});
        off += static_cast<Eigen::Index>(W) * in;
        layout_.push_back({off, W, 1});
        off += W;
        in = W;
      }
      layout_.push_back({off, T, in});
      off += static_cast<Eigen::Index>(T) * in;
      layout_.push_back({off, T, 1});
      off += T;
    };
    for (int l = 0; l < cfg_.coupling_layers; ++l) {
      push_net();  // scale net
      push_net();  // shift net
    }
    theta_ = Vector::Zero(off);
    blocks_per_net_ = 2 * (cfg_.hidden_layers + 1);
  }

  void init_params() {
    RngStream rng(cfg_.init_seed);
    std::size_t blk = 0;
    auto init_net = [&]() {
      for (int h = 0; h <= cfg_.hidden_layers; ++h) {
        const auto& wb = layout_[blk++];
        const auto& bb = layout_[blk++];
        if (h == cfg_.hidden_layers) {
          // zero-initialized output layer: the flow starts at the identity
          Eigen::Map<Matrix>(theta_.data() + wb.offset, wb.rows, wb.cols).setZero();
          Eigen::Map<Matrix>(theta_.data() + bb.offset, bb.rows, bb.cols).setZero();
        } else {
          const double bound = std::sqrt(6.0 / static_cast<double>(wb.cols));
          auto wmap = Eigen::Map<Matrix>(theta_.data() + wb.offset, wb.rows, wb.cols);
          for (Eigen::Index c = 0; c < wb.cols; ++c) {
            for (Eigen::Index r = 0; r < wb.rows; ++r) {
              wmap(r, c) = bound * (2.0 * rng.uniform() - 1.0);
            }
          }
          Eigen::Map<Matrix>(theta_.data() + bb.offset, bb.rows, bb.cols).setZero();
        }
      }
    };
    for (int l = 0; l < cfg_.coupling_layers; ++l) {
      init_net();
      init_net();
    }
  }

  void build_masks() {
    const int T = cfg_.lattice_size;
    for (int l = 0; l < cfg_.coupling_layers; ++l) {
      Matrix m(T, 1), im(T, 1);
      for (int t = 0; t < T; ++t) {
        bool keep = ((t + l) % 2 == 0);
        m(t, 0) = keep ? 1.0 : 0.0;
        im(t, 0) = keep ? 0.0 : 1.0;
      }
      mask_.push_back(m);
      inv_mask_.push_back(im);
    }
  }

  const Matrix param_block(std::size_t blk) const {
    const auto& b = layout_[blk];
    return Eigen::Map<const Matrix>(theta_.data() + b.offset, b.rows, b.cols);
  }

  /// Value-only conditioner: s (clamped) and t for layer l given masked input h.
  void conditioner_values(int l, const Matrix& h, Matrix& s, Matrix& t) const {
    std::size_t base = static_cast<std::size_t>(l) * 2 * blocks_per_net_;
    auto run_net = [&](std::size_t net_base, const Matrix& in) {
      Matrix a = in;
      for (int hid = 0; hid < cfg_.hidden_layers; ++hid) {
        Matrix v = param_block(net_base + 2 * hid) * a;
        v.colwise() += param_block(net_base + 2 * hid + 1).col(0);
        a = v.array().tanh().matrix();
      }
      Matrix v = param_block(net_base + 2 * cfg_.hidden_layers) * a;
      v.colwise() += param_block(net_base + 2 * cfg_.hidden_layers + 1).col(0);
      return v;
    };
    s = (run_net(base, h).array().tanh() * cfg_.scale_clamp).matrix();
    t = run_net(base + blocks_per_net_, h);
  }

  std::pair<Var, Var> record_conditioner(Tape& tape, const BoundParams& bp, int l, Var h) const {
    std::size_t base = static_cast<std::size_t>(l) * 2 * blocks_per_net_;
    auto run_net = [&](std::size_t net_base, Var in) {
      Var a = in;
      for (int hid = 0; hid < cfg_.hidden_layers; ++hid) {
        a = tape.tanh(tape.affine(bp.leaves[net_base + 2 * hid], a,
                                  bp.leaves[net_base + 2 * hid + 1]));
      }
      return tape.affine(bp.leaves[net_base + 2 * cfg_.hidden_layers], a,
                         bp.leaves[net_base + 2 * cfg_.hidden_layers + 1]);
    };
    Var s = tape.scale(tape.tanh(run_net(base, h)), cfg_.scale_clamp);
    Var t = run_net(base + blocks_per_net_, h);
    return {s, t};
  }

  FlowConfig cfg_;
  Vector theta_;
  std::vector<detail::ParamBlock> layout_;
  std::size_t blocks_per_net_ = 0;
  std::vector<Matrix> mask_;
  std::vector<Matrix> inv_mask_;
};

}  // namespace flowvi
