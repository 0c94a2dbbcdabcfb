#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowvi/rng.hpp"
#include "flowvi/target.hpp"

namespace flowvi {

// ---- stable weight arithmetic ----------------------------------------------

inline double logsumexp(const RowVector& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isnan(v[i])) continue;
    m = std::max(m, v[i]);
  }
  if (!std::isfinite(m)) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isnan(v[i])) continue;
    s += std::exp(v[i] - m);
  }
  return m + std::log(s);
}

inline void check_weights_usable(const RowVector& log_wtilde, const char* where) {
  for (Eigen::Index i = 0; i < log_wtilde.size(); ++i) {
    if (std::isfinite(log_wtilde[i])) return;
  }
  throw DegenerateWeights(std::string(where) + ": all log-weights are -inf/NaN");
}

/// log Zhat = log[(1/N) sum exp(log_wtilde_i)].
inline double log_z_hat(const RowVector& log_wtilde) {
  if (log_wtilde.size() < 1) throw UsageError("z_hat: need at least one weight");
  check_weights_usable(log_wtilde, "z_hat");
  return logsumexp(log_wtilde) - std::log(static_cast<double>(log_wtilde.size()));
}

/// Partition-function estimate Zhat = (1/N) sum wtilde_i via log-sum-exp.
inline double z_hat(const RowVector& log_wtilde) { return std::exp(log_z_hat(log_wtilde)); }

/// Self-normalized weights wtilde_i / sum_j wtilde_j; sums to one by
/// construction and survives weights spanning hundreds of orders of magnitude.
inline RowVector normalized_weights(const RowVector& log_wtilde) {
  check_weights_usable(log_wtilde, "normalized_weights");
  const double lse = logsumexp(log_wtilde);
  RowVector r(log_wtilde.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    r[i] = std::isnan(log_wtilde[i]) ? 0.0 : std::exp(log_wtilde[i] - lse);
  }
  return r;
}

/// Reverse ESS estimate from flow samples: (sum w)^2 / (N sum w^2), i.e.
/// 1 / ((1/N) sum what_i^2). Always in (0, 1] up to rounding.
inline double reverse_ess(const RowVector& log_wtilde) {
  if (log_wtilde.size() < 2) throw UsageError("reverse_ess: need at least two samples");
  check_weights_usable(log_wtilde, "reverse_ess");
  const double lse1 = logsumexp(log_wtilde);
  const double lse2 = logsumexp(2.0 * log_wtilde);
  const double v = std::exp(2.0 * lse1 - lse2 - std::log(static_cast<double>(log_wtilde.size())));
  return std::min(v, 1.0);
}

/// Forward ESS estimate from target samples: 1 / ((1/M) sum what(x_i)) with
/// what = wtilde / Zhat, Zhat estimated from an independent flow batch.
inline double forward_ess(const RowVector& log_wtilde_p, double log_z_hat_from_q) {
  if (log_wtilde_p.size() < 2) throw UsageError("forward_ess: need at least two samples");
  check_weights_usable(log_wtilde_p, "forward_ess");
  const double lse = logsumexp(log_wtilde_p);
  return std::exp(std::log(static_cast<double>(log_wtilde_p.size())) + log_z_hat_from_q - lse);
}

struct EssReport {
  double reverse_ess = 0.0;
  std::optional<double> forward_ess;
  double z_hat = 0.0;
  long n_q_samples = 0;
  long n_p_samples = 0;
  double reverse_lo = 0.0, reverse_hi = 0.0;    // bootstrap 68% interval
  double forward_lo = 0.0, forward_hi = 0.0;
  std::uint64_t q_seed = 0, p_seed = 0;
};

/// Bootstrap 68% interval (16th/84th percentile over B resamples) of a
/// statistic of the log-weights.
inline std::pair<double, double> bootstrap_interval(
    const RowVector& log_w, const std::function<double(const RowVector&)>& stat, RngStream& rng,
    int resamples = 1000) {
  const Eigen::Index n = log_w.size();
  std::vector<double> vals;
  vals.reserve(resamples);
  RowVector re(n);
  for (int b = 0; b < resamples; ++b) {
    for (Eigen::Index i = 0; i < n; ++i) re[i] = log_w[rng.below(static_cast<std::uint64_t>(n))];
    vals.push_back(stat(re));
  }
  std::sort(vals.begin(), vals.end());
  auto pick = [&](double q) {
    double idx = q * (vals.size() - 1);
    return vals[static_cast<std::size_t>(std::llround(idx))];
  };
  return {pick(0.16), pick(0.84)};
}

// ---- neural importance sampling ---------------------------------------------

/// Log unnormalized importance weights log wtilde = -S(x) - log q(x) for a
/// batch of model samples. Returns the sample batch too.
template <class ModelT>
struct WeightedBatch {
  Matrix x;
  RowVector log_q;
  RowVector action;
  RowVector log_wtilde;
};

template <class ModelT>
WeightedBatch<ModelT> draw_weighted_batch(const ModelT& model, const Target& target, int n,
                                          RngStream& rng) {
  WeightedBatch<ModelT> b;
  Matrix z = model.sample_base(rng, n);
  RowVector log_det;
  model.forward_values(z, b.x, log_det);
  b.log_q = model.base_logprob_values(z) - log_det;
  b.action = target.action_values(b.x);
  b.log_wtilde = -b.action - b.log_q;
  return b;
}

/// Self-normalized estimate of E_p[Q] with the delta-method standard error
/// sqrt(Var(Q) / (N * ESS)).
template <class ModelT>
std::pair<double, double> nis_estimate(const ModelT& model, const Target& target,
                                       const std::function<double(const Vector&)>& observable,
                                       int n, RngStream& rng) {
  if (n < 2) throw UsageError("nis_estimate: need at least two samples");
  auto batch = draw_weighted_batch(model, target, n, rng);
  RowVector r = normalized_weights(batch.log_wtilde);
  RowVector q_vals(n);
  for (int i = 0; i < n; ++i) q_vals[i] = observable(batch.x.col(i));
  const double mean = r.cwiseProduct(q_vals).sum() / r.sum();
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = q_vals[i] - mean;
    var += r[i] * d * d;
  }
  const double ess = reverse_ess(batch.log_wtilde);
  const double stderr_ = std::sqrt(std::max(var, 0.0) / (static_cast<double>(n) * ess));
  return {mean, stderr_};
}

// ---- overrelaxed HMC ---------------------------------------------------------

struct HmcConfig {
  int n_chains = 10;
  int n_steps = 100000;     // post-burn-in steps per chain
  int n_leapfrog = 50;      // leapfrog sub-steps per proposal
  double step_size = 0.1;   // starting value; tuned during burn-in
  int overrelax_freq = 10;  // every k-th step mirrors x -> -x (0 disables)
  int burn_in = 10000;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_chains < 1 || n_steps < 1 || n_leapfrog < 1 || burn_in < 0) {
      throw UsageError("hmc: counts must be >= 1 (burn_in >= 0)");
    }
    if (step_size <= 0.0) throw UsageError("hmc: step size must be > 0");
  }
};

struct HmcResult {
  Matrix samples;  // (n_chains * n_steps) x dim, chains concatenated
  double acceptance_rate = 0.0;
  double tuned_step_size = 0.0;
  int restarts = 0;
  int overrelax_rejects = 0;
};

namespace detail {

/// One leapfrog trajectory for all chains at once (columns are chains).
inline void leapfrog(const Target& target, Matrix& x, Matrix& p, double eps, int n_steps) {
  p -= 0.5 * eps * target.action_grad_values(x);
  for (int s = 0; s < n_steps; ++s) {
    x += eps * p;
    if (s + 1 < n_steps) p -= eps * target.action_grad_values(x);
  }
  p -= 0.5 * eps * target.action_grad_values(x);
}

}  // namespace detail

/// Leapfrog HMC with Metropolis correction and periodic overrelaxation
/// (x -> -x, exact for even actions). Chains are stepped together as matrix
/// columns but each chain draws from its own seed-derived stream, so results
/// do not depend on how chains are grouped. The step size is tuned during
/// burn-in toward a 0.7 +/- 0.1 acceptance rate and then frozen.
inline HmcResult hmc_sample(const Target& target, int dim, const HmcConfig& cfg) {
  cfg.validate();
  HmcResult res;
  const int C = cfg.n_chains;
  std::vector<RngStream> rng;
  rng.reserve(C);
  for (int c = 0; c < C; ++c) rng.push_back(RngStream::derive(cfg.seed, "hmc-chain", c));

  Matrix x(dim, C);
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < dim; ++i) x(i, c) = rng[c].normal();
  }

  double eps = cfg.step_size;
  long accepted = 0, proposed = 0;
  long window_accepted = 0, window_proposed = 0;
  const int tune_window = 50;
  res.samples.resize(static_cast<Eigen::Index>(C) * cfg.n_steps, dim);

  Matrix p(dim, C);
  const long total_steps = static_cast<long>(cfg.burn_in) + cfg.n_steps;
  for (long step = 0; step < total_steps; ++step) {
    const bool burning = step < cfg.burn_in;
    if (cfg.overrelax_freq > 0 && (step + 1) % cfg.overrelax_freq == 0) {
      // Mirror move. Metropolis-correct in general; for even actions the
      // energy difference is identically zero and the move always accepts.
      RowVector s_old = target.action_values(x);
      RowVector s_new = target.action_values(-x);
      for (int c = 0; c < C; ++c) {
        const double log_a = s_old[c] - s_new[c];
        if (std::log(rng[c].uniform()) <= log_a) {
          x.col(c) = -x.col(c);
        } else {
          ++res.overrelax_rejects;
        }
      }
    } else {
      for (int c = 0; c < C; ++c) {
        for (int i = 0; i < dim; ++i) p(i, c) = rng[c].normal();
      }
      RowVector h_old = target.action_values(x) + 0.5 * p.array().square().colwise().sum().matrix();
      Matrix x_new = x, p_new = p;
      detail::leapfrog(target, x_new, p_new, eps, cfg.n_leapfrog);
      RowVector h_new(C);
      bool finite = x_new.allFinite() && p_new.allFinite();
      if (finite) {
        h_new = target.action_values(x_new) + 0.5 * p_new.array().square().colwise().sum().matrix();
      }
      for (int c = 0; c < C; ++c) {
        ++proposed;
        if (burning) ++window_proposed;
        if (!finite || !std::isfinite(h_new[c])) {
          // restart the chain from a fresh base draw
          for (int i = 0; i < dim; ++i) x(i, c) = rng[c].normal();
          ++res.restarts;
          continue;
        }
        const double log_a = h_old[c] - h_new[c];
        if (std::log(rng[c].uniform()) <= log_a) {
          x.col(c) = x_new.col(c);
          ++accepted;
          if (burning) ++window_accepted;
        }
      }
      if (burning && window_proposed >= tune_window * C) {
        const double rate =
            static_cast<double>(window_accepted) / static_cast<double>(window_proposed);
        if (rate > 0.8) eps *= 1.1;
        else if (rate < 0.6) eps /= 1.1;
        window_accepted = window_proposed = 0;
      }
    }
    if (!burning) {
      const long k = step - cfg.burn_in;
      for (int c = 0; c < C; ++c) {
        res.samples.row(static_cast<Eigen::Index>(c) * cfg.n_steps + k) = x.col(c).transpose();
      }
    }
  }
  res.acceptance_rate = proposed > 0 ? static_cast<double>(accepted) / proposed : 0.0;
  res.tuned_step_size = eps;
  return res;
}

// ---- sample dump format --------------------------------------------------------
//
// 32-byte header: magic "NFSAMPLE" (8 bytes), version u32, reserved u32,
// rows u64, cols u64, then rows*cols little-endian f64 in row-major order.

inline void write_sample_dump(const std::string& path, const Matrix& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open sample dump for writing: " + path);
  const char magic[8] = {'N', 'F', 'S', 'A', 'M', 'P', 'L', 'E'};
  os.write(magic, 8);
  std::uint32_t version = 1, reserved = 0;
  std::uint64_t rows = static_cast<std::uint64_t>(samples.rows());
  std::uint64_t cols = static_cast<std::uint64_t>(samples.cols());
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&reserved), 4);
  os.write(reinterpret_cast<const char*>(&rows), 8);
  os.write(reinterpret_cast<const char*>(&cols), 8);
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
      double v = samples(r, c);
      os.write(reinterpret_cast<const char*>(&v), 8);
    }
  }
  if (!os) throw UsageError("sample dump write failed: " + path);
}

inline Matrix read_sample_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open sample dump: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "NFSAMPLE", 8) != 0) {
    throw ParseError("sample dump: bad magic in " + path);
  }
  std::uint32_t version = 0, reserved = 0;
  std::uint64_t rows = 0, cols = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&reserved), 4);
  is.read(reinterpret_cast<char*>(&rows), 8);
  is.read(reinterpret_cast<char*>(&cols), 8);
  if (!is || version != 1) throw ParseError("sample dump: unsupported header in " + path);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v;
      is.read(reinterpret_cast<char*>(&v), 8);
      if (!is) throw ParseError("sample dump: truncated data in " + path);
      m(r, c) = v;
    }
  }
  return m;
}

}  // namespace flowvi
