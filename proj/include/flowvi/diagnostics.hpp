#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "flowvi/estimators.hpp"
#include "flowvi/training.hpp"

namespace flowvi {

/// Minimal location-scale flow x = sigma .* z + mu over a unit Gaussian
/// base. Its density is the Gaussian N(mu, sigma^2), whose Fisher
/// information is known in closed form (1/sigma^2 for mu, 2/sigma^2 for
/// sigma), which makes it the oracle model for the asymptotic checks.
class AffineFlow {
 public:
  AffineFlow(const Vector& mu, const Vector& sigma) : mu_(mu), sigma_(sigma) {
    if (mu.size() != sigma.size()) throw UsageError("affine flow: size mismatch");
    if ((sigma.array() <= 0.0).any()) throw UsageError("affine flow: sigma must be > 0");
  }

  int dim() const { return static_cast<int>(mu_.size()); }
  Eigen::Index param_count() const { return 2 * mu_.size(); }

  Vector params() const {
    Vector p(param_count());
    p << mu_, sigma_;
    return p;
  }
  void set_params(const Vector& p) {
    if (p.size() != param_count()) throw UsageError("affine flow: parameter size mismatch");
    mu_ = p.head(mu_.size());
    sigma_ = p.tail(sigma_.size());
  }

  void forward_values(const Matrix& z, Matrix& x, RowVector& log_det) const {
    x = (z.array().colwise() * sigma_.array()).matrix();
    x.colwise() += mu_;
    log_det = RowVector::Constant(z.cols(), sigma_.array().log().sum());
  }

  void inverse_values(const Matrix& x, Matrix& z, RowVector& log_det_inv) const {
    z = x;
    z.colwise() -= mu_;
    z = (z.array().colwise() / sigma_.array()).matrix();
    log_det_inv = RowVector::Constant(x.cols(), -sigma_.array().log().sum());
  }

  RowVector base_logprob_values(const Matrix& z) const {
    const double norm = -0.5 * dim() * std::log(2.0 * M_PI);
    return (z.array().square().colwise().sum() * -0.5 + norm).matrix();
  }

  RowVector log_prob_values(const Matrix& x) const {
    Matrix z;
    RowVector ldi;
    inverse_values(x, z, ldi);
    return base_logprob_values(z) + ldi;
  }

  Matrix sample_base(RngStream& rng, int n) const {
    Matrix z(dim(), n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < dim(); ++i) z(i, j) = rng.normal();
    }
    return z;
  }

  struct BoundParams {
    Var mu, sigma;
    bool requires_grad = false;
  };

  BoundParams bind(Tape& tape, bool requires_grad) const {
    return {tape.leaf(mu_, requires_grad), tape.leaf(sigma_, requires_grad), requires_grad};
  }

  std::pair<Var, Var> record_forward(Tape& tape, const BoundParams& bp, Var z) const {
    Var x = tape.add(tape.mul(z, bp.sigma), bp.mu);
    Var ld_scalar = tape.sum(tape.log(bp.sigma));
    Var ld = tape.mul(tape.constant(Matrix::Ones(1, tape.value(z).cols())), ld_scalar);
    return {x, ld};
  }

  std::pair<Var, Var> record_inverse(Tape& tape, const BoundParams& bp, Var x) const {
    Var z = tape.div(tape.sub(x, bp.mu), bp.sigma);
    Var ld_scalar = tape.sum(tape.log(bp.sigma));
    Var ldi = tape.neg(tape.mul(tape.constant(Matrix::Ones(1, tape.value(x).cols())), ld_scalar));
    return {z, ldi};
  }

  Var record_base_logprob(Tape& tape, Var z) const {
    const double norm = -0.5 * dim() * std::log(2.0 * M_PI);
    return tape.shift(tape.scale(tape.colsum(tape.square(z)), -0.5), norm);
  }

  Var record_log_prob(Tape& tape, const BoundParams& bp, Var x) const {
    auto [z, ldi] = record_inverse(tape, bp, x);
    return tape.add(record_base_logprob(tape, z), ldi);
  }

  Vector grad_of(const Adjoints& adj, const BoundParams& bp) const {
    Vector g(param_count());
    g.head(mu_.size()) = adj.of(bp.mu, mu_.size(), 1);
    g.tail(sigma_.size()) = adj.of(bp.sigma, sigma_.size(), 1);
    return g;
  }

  /// Closed-form diagonal Fisher information of N(mu, sigma^2) in the
  /// (mu, sigma) parametrization.
  Vector fisher_diagonal() const {
    Vector f(param_count());
    f.head(mu_.size()) = sigma_.array().square().inverse();
    f.tail(sigma_.size()) = 2.0 * sigma_.array().square().inverse();
    return f;
  }

 private:
  Vector mu_, sigma_;
};

// ---- variance / bias measurement -------------------------------------------

struct VarianceReport {
  EstimatorId estimator = EstimatorId::RepQP;
  int batch_size = 0;
  int replicates = 0;
  Vector mean;          // componentwise mean over replicates
  Vector variance;      // componentwise (unbiased) variance over replicates
  double mean_norm = 0.0;
  double norm_variance = 0.0;  // variance of the gradient norm
  std::vector<std::string> failures;  // per-replicate errors, index-tagged
};

/// Evaluate an estimator on R independent batches and report componentwise
/// mean/variance. Replicate seeds derive from the master seed by index, so
/// the report is identical no matter how replicates are scheduled.
template <class ModelT>
VarianceReport measure_variance(EstimatorId id, const ModelT& model, const Target& target, int n,
                                int replicates, std::uint64_t seed) {
  if (replicates < 30) throw UsageError("measure_variance: need at least 30 replicates");
  VarianceReport rep;
  rep.estimator = id;
  rep.batch_size = n;
  rep.replicates = replicates;
  const Eigen::Index p = model.param_count();
  Vector sum = Vector::Zero(p), sumsq = Vector::Zero(p);
  double nsum = 0.0, nsumsq = 0.0;
  int ok = 0;
  for (int r = 0; r < replicates; ++r) {
    RngStream rng = RngStream::derive(seed, "variance-replicate", static_cast<std::uint64_t>(r));
    Matrix z = model.sample_base(rng, n);
    try {
      GradientEstimate est = evaluate_estimator(id, model, target, z);
      sum += est.grad;
      sumsq += est.grad.cwiseProduct(est.grad);
      nsum += est.grad_norm;
      nsumsq += est.grad_norm * est.grad_norm;
      ++ok;
    } catch (const std::exception& e) {
      rep.failures.push_back("replicate " + std::to_string(r) + ": " + e.what());
    }
  }
  if (ok < 2) throw DegenerateWeights("measure_variance: fewer than two successful replicates");
  rep.mean = sum / ok;
  rep.variance = (sumsq - ok * rep.mean.cwiseProduct(rep.mean)) / (ok - 1);
  rep.variance = rep.variance.cwiseMax(0.0);
  rep.mean_norm = nsum / ok;
  rep.norm_variance = std::max(0.0, (nsumsq - nsum * nsum / ok) / (ok - 1));
  return rep;
}

/// Monte-Carlo check that the score term has zero mean: returns the
/// componentwise-max |mean| and the matching standard error bound.
template <class ModelT>
std::pair<double, double> score_zero_mean_test(const ModelT& model, int n, std::uint64_t seed) {
  RngStream rng = RngStream::derive(seed, "score-zero-mean");
  Matrix z = model.sample_base(rng, n);
  // Accumulate per-sample score gradients in manageable chunks.
  const Eigen::Index p = model.param_count();
  Vector sum = Vector::Zero(p), sumsq = Vector::Zero(p);
  const int chunk = 256;
  for (int start = 0; start < n; start += chunk) {
    int len = std::min(chunk, n - start);
    for (int i = 0; i < len; ++i) {
      GradientEstimate est = score_qp(model, z.middleCols(start + i, 1));
      sum += est.grad;
      sumsq += est.grad.cwiseProduct(est.grad);
    }
  }
  Vector mean = sum / n;
  Vector se = ((sumsq / n - mean.cwiseProduct(mean)) / n).cwiseMax(0.0).cwiseSqrt();
  Eigen::Index worst = 0;
  double ratio = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) {
    double r = std::abs(mean[i]) / std::max(se[i], 1e-300);
    if (r > ratio) {
      ratio = r;
      worst = i;
    }
  }
  return {std::abs(mean[worst]), se[worst]};
}

// ---- singular-weight initial phase ------------------------------------------

/// Synthetic target whose action rises from zero at the well to a flat
/// plateau of height `height` per site: S(x) = sum_t height * (1 - exp(-(x_t
/// - center)^2 / (2 width^2))). Far from the well both the density and its
/// gradient are exponentially small, which is the flat-tail regime the
/// initial-phase analysis assumes.
class PlateauWellTarget : public Target {
 public:
  PlateauWellTarget(int dim, double center, double width, double height)
      : dim_(dim), center_(center), width_(width), height_(height) {
    if (width <= 0.0 || height <= 0.0) throw UsageError("plateau well: bad shape parameters");
  }

  double center() const { return center_; }
  double width() const { return width_; }
  double height() const { return height_; }

  Var record_action(Tape& tape, Var x) const override {
    Var d = tape.shift(x, -center_);
    Var bump = tape.exp(tape.scale(tape.square(d), -0.5 / (width_ * width_)));
    Var site = tape.scale(tape.shift(tape.neg(bump), 1.0), height_);
    return tape.colsum(site);
  }

 private:
  int dim_;
  double center_, width_, height_;
};

struct SingularRegimeSpec {
  int batch_size = 64;
  double epsilon = 1e-8;       // required weight separation wtilde_i / wtilde_N
  Vector mode_point;           // representative high-density configuration
  double extra_separation = 1e-4;  // build total tail mass well below epsilon
  int max_draws = 100000;
  std::uint64_t seed = 0;
};

struct SingularRegimeResult {
  double norm_pathpq = 0.0;
  double norm_zpathpq = 0.0;
  double norm_pathqp = 0.0;
  double achieved_ratio = 0.0;  // max tail weight relative to the singular one
  Vector grad_pathpq, grad_zpathpq, grad_pathqp, grad_single;
};

/// Construct a batch with one sample in the target's high-density region and
/// N-1 samples drawn from the base but restricted to the flat tail, then
/// evaluate the three path estimators on it. grad_single is the PathPQ
/// estimator restricted to the singular sample alone (its dominant term).
template <class ModelT>
SingularRegimeResult singular_regime_probe(const SingularRegimeSpec& spec, const ModelT& model,
                                           const Target& target) {
  if (spec.batch_size < 2) throw UsageError("singular probe: batch size must be >= 2");
  if (spec.epsilon > 1e-6) throw UsageError("singular probe: epsilon must be <= 1e-6");
  if (spec.mode_point.size() != model.dim()) {
    throw UsageError("singular probe: mode point has wrong dimension");
  }
  const int n = spec.batch_size;
  // The singular sample: pull the mode configuration back through the flow.
  Matrix x_mode = spec.mode_point;
  Matrix z_mode;
  RowVector ldi;
  model.inverse_values(x_mode, z_mode, ldi);
  const double lw_mode = (-target.action_values(x_mode) - model.log_prob_values(x_mode))(0);

  const double max_tail_lw =
      lw_mode + std::log(spec.epsilon) + std::log(spec.extra_separation / (n - 1));
  RngStream rng = RngStream::derive(spec.seed, "singular-tail");
  Matrix z(model.dim(), n);
  double worst_ratio = 0.0;
  int found = 0;
  for (int draw = 0; draw < spec.max_draws && found < n - 1; ++draw) {
    Matrix zc = model.sample_base(rng, 1);
    Matrix xc;
    RowVector ld;
    model.forward_values(zc, xc, ld);
    const double lw = (-target.action_values(xc) - model.log_prob_values(xc))(0);
    if (lw <= max_tail_lw) {
      z.col(found++) = zc.col(0);
      worst_ratio = std::max(worst_ratio, std::exp(lw - lw_mode));
    } else {
      worst_ratio = std::max(worst_ratio, std::exp(std::min(lw - lw_mode, 700.0)));
    }
  }
  if (found < n - 1) {
    throw ConstructionError("singular probe: could not realize the weight separation",
                            worst_ratio);
  }
  z.col(n - 1) = z_mode.col(0);

  SingularRegimeResult res;
  res.achieved_ratio = worst_ratio;
  res.grad_pathpq = path_pq(model, target, z).grad;
  res.grad_zpathpq = zpath_pq(model, target, z).grad;
  res.grad_pathqp = path_qp(model, target, z).grad;
  // Single-sample PathPQ term: self-normalization gives the lone sample
  // coefficient one, so this is the estimator's dominant direction.
  {
    Matrix z1 = z.col(n - 1);
    Matrix xbar;
    RowVector ld;
    model.forward_values(z1, xbar, ld);
    res.grad_single =
        detail::coefficient_path_grad(model, target, z1, xbar, RowVector::Ones(1), nullptr);
  }
  res.norm_pathpq = res.grad_pathpq.norm();
  res.norm_zpathpq = res.grad_zpathpq.norm();
  res.norm_pathqp = res.grad_pathqp.norm();
  return res;
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// ---- per-sample contributions -------------------------------------------------

/// Norm of each sample's own contribution to an estimator (coefficients
/// rescaled by N so that a perfect-approximation PathPQ term is directly
/// comparable to the PathQP one). Used by the vanishing-gradient checks.
template <class ModelT>
Vector per_sample_grad_norms(EstimatorId id, const ModelT& model, const Target& target,
                             const Matrix& z) {
  const int n = static_cast<int>(z.cols());
  Vector norms(n);
  RowVector lw(n);
  if (id == EstimatorId::ReinfPQ || id == EstimatorId::PathPQ || id == EstimatorId::ZPathPQ) {
    auto sv = detail::shard_values(model, target, z);
    lw = sv.log_wtilde;
  }
  for (int i = 0; i < n; ++i) {
    Matrix zi = z.col(i);
    Vector g;
    switch (id) {
      case EstimatorId::RepQP:
        g = rep_qp(model, target, zi).grad;
        break;
      case EstimatorId::PathQP:
        g = path_qp(model, target, zi).grad;
        break;
      case EstimatorId::Score:
        g = score_qp(model, zi).grad;
        break;
      case EstimatorId::ReinfPQ: {
        RowVector r = normalized_weights(lw);
        g = -static_cast<double>(n) * r[i] * score_qp(model, zi).grad;
        break;
      }
      case EstimatorId::PathPQ: {
        RowVector r = normalized_weights(lw);
        g = static_cast<double>(n) * r[i] * path_qp(model, target, zi).grad;
        break;
      }
      case EstimatorId::ZPathPQ: {
        RowVector r = normalized_weights(lw);
        g = static_cast<double>(n) * r[i] * (1.0 - r[i]) * path_qp(model, target, zi).grad;
        break;
      }
    }
    norms[i] = g.norm();
  }
  return norms;
}

// ---- gradient-norm traces -------------------------------------------------------

struct GradnormSeries {
  std::string estimator;
  std::vector<long> iters;
  std::vector<double> grad_norm;
  std::vector<double> ema;  // exponential moving average, alpha = 0.01
};

/// Split a metrics CSV into per-estimator (iter, grad_norm) series plus EMA
/// smoothing, and write them as a plot-data CSV with two columns per series.
inline std::vector<GradnormSeries> gradnorm_trace(const std::string& metrics_path,
                                                  const std::string& out_path,
                                                  double ema_alpha = 0.01) {
  std::vector<MetricsRow> rows = read_metrics_csv(metrics_path);
  if (rows.empty()) throw ParseError("gradnorm trace: metrics CSV has no data rows", 1);
  std::vector<GradnormSeries> series;
  auto find = [&](const std::string& est) -> GradnormSeries& {
    for (auto& s : series) {
      if (s.estimator == est) return s;
    }
    series.push_back(GradnormSeries{est, {}, {}, {}});
    return series.back();
  };
  for (const auto& r : rows) {
    GradnormSeries& s = find(r.estimator_id);
    s.iters.push_back(r.iter);
    s.grad_norm.push_back(r.grad_norm);
    double prev = s.ema.empty() ? r.grad_norm : s.ema.back();
    s.ema.push_back(prev + ema_alpha * (r.grad_norm - prev));
  }
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw UsageError("cannot open plot-data file: " + out_path);
    std::string header;
    std::size_t max_len = 0;
    for (const auto& s : series) {
      if (!header.empty()) header += ",";
      header += s.estimator + "_iter," + s.estimator + "_grad_norm," + s.estimator +
                "_ema_iter," + s.estimator + "_ema_grad_norm";
      max_len = std::max(max_len, s.iters.size());
    }
    os << header << '\n';
    for (std::size_t i = 0; i < max_len; ++i) {
      std::string line;
      for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        if (k > 0) line += ",";
        if (i < s.iters.size()) {
          char buf[128];
          std::snprintf(buf, sizeof(buf), "%ld,%.17g,%ld,%.17g", s.iters[i], s.grad_norm[i],
                        s.iters[i], s.ema[i]);
          line += buf;
        } else {
          line += ",,,";
        }
      }
      os << line << '\n';
    }
  }
  return series;
}

/// Write a structured-text report (key: value lines) with all seeds and
/// settings embedded; the diagnostics commands use it for their summaries.
inline void write_report(const std::string& path,
                         const std::vector<std::pair<std::string, std::string>>& fields) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot open report file: " + path);
  for (const auto& [k, v] : fields) os << k << ": " << v << '\n';
}

}  // namespace flowvi
