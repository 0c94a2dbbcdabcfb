#pragma once

#include <string>
#include <thread>
#include <vector>

#include "flowvi/sampling.hpp"
#include "flowvi/target.hpp"

namespace flowvi {

enum class EstimatorId { RepQP, PathQP, Score, ReinfPQ, PathPQ, ZPathPQ };

inline const char* estimator_name(EstimatorId id) {
  switch (id) {
    case EstimatorId::RepQP: return "RepQP";
    case EstimatorId::PathQP: return "PathQP";
    case EstimatorId::Score: return "Score";
    case EstimatorId::ReinfPQ: return "ReinfPQ";
    case EstimatorId::PathPQ: return "PathPQ";
    case EstimatorId::ZPathPQ: return "ZPathPQ";
  }
  return "?";
}

inline EstimatorId estimator_from_name(const std::string& name) {
  if (name == "RepQP") return EstimatorId::RepQP;
  if (name == "PathQP") return EstimatorId::PathQP;
  if (name == "Score") return EstimatorId::Score;
  if (name == "ReinfPQ") return EstimatorId::ReinfPQ;
  if (name == "PathPQ") return EstimatorId::PathPQ;
  if (name == "ZPathPQ") return EstimatorId::ZPathPQ;
  throw UsageError("unknown estimator '" + name + "'");
}

struct GradientEstimate {
  EstimatorId id = EstimatorId::RepQP;
  Vector grad;
  int batch_size = 0;
  RowVector log_wtilde;  // empty for Score (no weights involved)
  double grad_norm = 0.0;
  double loss_surrogate = 0.0;
  std::size_t peak_tape_bytes = 0;
};

struct EvalOptions {
  int workers = 1;
};

namespace detail {

/// Contiguous column ranges for batch sharding; reduction always walks the
/// shards in index order so results are reproducible for a fixed count.
inline std::vector<std::pair<int, int>> shard_ranges(int n, int workers) {
  int w = std::max(1, std::min(workers, n));
  std::vector<std::pair<int, int>> out;
  int base = n / w, rem = n % w;
  int start = 0;
  for (int i = 0; i < w; ++i) {
    int len = base + (i < rem ? 1 : 0);
    out.emplace_back(start, len);
    start += len;
  }
  return out;
}

template <class Fn>
void run_sharded(const std::vector<std::pair<int, int>>& shards, Fn&& fn) {
  if (shards.size() == 1) {
    fn(0, shards[0].first, shards[0].second);
    return;
  }
  std::vector<std::exception_ptr> errors(shards.size());
  std::vector<std::thread> threads;
  threads.reserve(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) {
    threads.emplace_back([&, i]() {
      try {
        fn(i, shards[i].first, shards[i].second);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Plain forward pass plus weight ingredients for one shard.
template <class ModelT>
struct ShardValues {
  Matrix x;
  RowVector log_q;    // log q(x) via the forward route: base(z) - logdet
  RowVector action;
  RowVector log_wtilde;
};

template <class ModelT>
ShardValues<ModelT> shard_values(const ModelT& model, const Target& target, const Matrix& z) {
  ShardValues<ModelT> sv;
  RowVector log_det;
  model.forward_values(z, sv.x, log_det);
  if (!sv.x.allFinite()) throw NumericError("forward pass produced non-finite samples");
  sv.log_q = model.base_logprob_values(z) - log_det;
  sv.action = target.action_values(sv.x);
  sv.log_wtilde = -sv.action - sv.log_q;
  return sv;
}

/// Path-type gradient of sum_i c_i * (S(g(z_i)) + log q(g(z_i))) where the
/// log-q term is the two-pass path gradient: G_i = d log q(x)/dx at the
/// detached sample, contracted against a differentiable forward pass. The
/// action term rides along in the same sweep since its path and total
/// gradients coincide. Tapes are reset between phases, so peak memory stays
/// at one forward-plus-inverse pass.
template <class ModelT>
Vector coefficient_path_grad(const ModelT& model, const Target& target, const Matrix& z,
                             const Matrix& xbar, const RowVector& coeff, MemoryMeter* meter) {
  Matrix g_x;
  {
    Tape tape(meter);
    auto bp = model.bind(tape, /*requires_grad=*/false);
    Var x_leaf = tape.leaf(xbar, true);
    Var logq = model.record_log_prob(tape, bp, x_leaf);
    Adjoints adj = tape.backward(tape.sum(logq));
    g_x = adj.of(x_leaf, xbar.rows(), xbar.cols());
  }
  Tape tape(meter);
  auto bp = model.bind(tape, /*requires_grad=*/true);
  Var z_leaf = tape.constant(z);
  auto [x, log_det] = model.record_forward(tape, bp, z_leaf);
  (void)log_det;
  Var s_row = target.record_action(tape, x);
  g_x = g_x.array().rowwise() * coeff.array();  // fold per-sample coefficients into G
  Var loss = tape.add(tape.dot(tape.constant(coeff), s_row), tape.dot(tape.constant(g_x), x));
  Adjoints adj = tape.backward(loss);
  return model.grad_of(adj, bp);
}

/// Score-type gradient of sum_i c_i * d/dtheta log q(x_i) with x_i held fixed.
template <class ModelT>
Vector coefficient_score_grad(const ModelT& model, const Matrix& xbar, const RowVector& coeff,
                              MemoryMeter* meter) {
  Tape tape(meter);
  auto bp = model.bind(tape, /*requires_grad=*/true);
  Var x_leaf = tape.constant(xbar);
  Var logq = model.record_log_prob(tape, bp, x_leaf);
  Adjoints adj = tape.backward(tape.dot(tape.constant(coeff), logq));
  return model.grad_of(adj, bp);
}

}  // namespace detail

/// Reverse-KL Monte-Carlo surrogate (1/N) sum_i [S(g(z_i)) + log q(g(z_i))]
/// for a fixed base batch; finite differences of this scalar over theta are
/// the oracle for the RepQP gradient.
template <class ModelT>
double reverse_kl_surrogate(const ModelT& model, const Target& target, const Matrix& z) {
  Matrix x;
  RowVector log_det;
  model.forward_values(z, x, log_det);
  RowVector log_q = model.base_logprob_values(z) - log_det;
  RowVector s = target.action_values(x);
  return (s + log_q).mean();
}

/// Total-gradient estimator of the reverse KL: the batch mean of
/// d/dtheta [S(g(z_i)) + log q(g(z_i))] through the full composite.
template <class ModelT>
GradientEstimate rep_qp(const ModelT& model, const Target& target, const Matrix& z,
                        const EvalOptions& opts = {}) {
  const int n = static_cast<int>(z.cols());
  if (n < 1) throw UsageError("rep_qp: empty batch");
  GradientEstimate est;
  est.id = EstimatorId::RepQP;
  est.batch_size = n;
  est.log_wtilde.resize(n);
  auto shards = detail::shard_ranges(n, opts.workers);
  std::vector<Vector> grads(shards.size());
  std::vector<std::size_t> peaks(shards.size(), 0);
  std::vector<double> surr(shards.size(), 0.0);
  detail::run_sharded(shards, [&](std::size_t si, int start, int len) {
    MemoryMeter meter;
    Tape tape(&meter);
    auto bp = model.bind(tape, true);
    Matrix zs = z.middleCols(start, len);
    Var z_leaf = tape.constant(zs);
    auto [x, log_det] = model.record_forward(tape, bp, z_leaf);
    Var s_row = target.record_action(tape, x);
    // log q(g(z)) = log q_Z(z) - log_det; the z-term is theta-independent.
    RowVector coeff = RowVector::Constant(len, 1.0 / n);
    Var loss = tape.dot(tape.constant(coeff), tape.sub(s_row, log_det));
    Adjoints adj = tape.backward(loss);
    grads[si] = model.grad_of(adj, bp);
    RowVector log_q = model.base_logprob_values(zs) - tape.value(log_det).row(0);
    RowVector s_vals = tape.value(s_row).row(0);
    est.log_wtilde.segment(start, len) = -s_vals - log_q;
    surr[si] = (s_vals + log_q).sum();
    peaks[si] = meter.peak();
  });
  est.grad = Vector::Zero(model.param_count());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    est.grad += grads[i];
    est.peak_tape_bytes += peaks[i];
    est.loss_surrogate += surr[i];
  }
  est.loss_surrogate /= n;
  est.grad_norm = est.grad.norm();
  return est;
}

namespace detail {

/// Shared driver for the coefficient-weighted path estimators
/// (PathQP, PathPQ, ZPathPQ differ only in their per-sample coefficients).
template <class ModelT, class CoeffFn>
GradientEstimate path_family(EstimatorId id, const ModelT& model, const Target& target,
                             const Matrix& z, const EvalOptions& opts, CoeffFn&& coeff_of) {
  const int n = static_cast<int>(z.cols());
  GradientEstimate est;
  est.id = id;
  est.batch_size = n;
  est.log_wtilde.resize(n);
  auto shards = shard_ranges(n, opts.workers);
  std::vector<ShardValues<ModelT>> values(shards.size());
  run_sharded(shards, [&](std::size_t si, int start, int len) {
    values[si] = shard_values(model, target, z.middleCols(start, len));
    est.log_wtilde.segment(start, len) = values[si].log_wtilde;
  });
  RowVector coeff = coeff_of(est.log_wtilde);
  std::vector<Vector> grads(shards.size());
  std::vector<std::size_t> peaks(shards.size(), 0);
  run_sharded(shards, [&](std::size_t si, int start, int len) {
    MemoryMeter meter;
    grads[si] = coefficient_path_grad(model, target, z.middleCols(start, len), values[si].x,
                                      coeff.segment(start, len), &meter);
    peaks[si] = meter.peak();
  });
  est.grad = Vector::Zero(model.param_count());
  double surr = 0.0;
  for (std::size_t si = 0; si < shards.size(); ++si) {
    est.grad += grads[si];
    est.peak_tape_bytes += peaks[si];
    surr += (values[si].action + values[si].log_q).sum();
  }
  est.grad_norm = est.grad.norm();
  est.loss_surrogate = (id == EstimatorId::PathQP)
                           ? surr / n
                           : -std::log(reverse_ess(est.log_wtilde));
  return est;
}

}  // namespace detail

/// Path-gradient estimator of the reverse KL. Identical in expectation to
/// rep_qp but with the score term excluded, so it vanishes sample-by-sample
/// when the model equals the target.
template <class ModelT>
GradientEstimate path_qp(const ModelT& model, const Target& target, const Matrix& z,
                         const EvalOptions& opts = {}) {
  const int n = static_cast<int>(z.cols());
  if (n < 1) throw UsageError("path_qp: empty batch");
  return detail::path_family(EstimatorId::PathQP, model, target, z, opts,
                             [n](const RowVector&) { return RowVector::Constant(n, 1.0 / n); });
}

/// Self-normalized path-gradient estimator of the forward KL:
/// -sum_i (wtilde_i / sum_j wtilde_j) path-grad log wtilde_i.
template <class ModelT>
GradientEstimate path_pq(const ModelT& model, const Target& target, const Matrix& z,
                         const EvalOptions& opts = {}) {
  if (z.cols() < 2) throw UsageError("path_pq: need at least two samples");
  return detail::path_family(EstimatorId::PathPQ, model, target, z, opts,
                             [](const RowVector& lw) { return normalized_weights(lw); });
}

/// Variant where the path derivative also acts on the estimated partition
/// function: coefficients r_i - r_i^2. Computed as r_i * sum_{j != i} r_j to
/// avoid cancellation when one weight dominates.
template <class ModelT>
GradientEstimate zpath_pq(const ModelT& model, const Target& target, const Matrix& z,
                          const EvalOptions& opts = {}) {
  if (z.cols() < 2) throw UsageError("zpath_pq: need at least two samples");
  return detail::path_family(EstimatorId::ZPathPQ, model, target, z, opts,
                             [](const RowVector& lw) {
                               RowVector r = normalized_weights(lw);
                               RowVector c(r.size());
                               const double total = r.sum();
                               for (Eigen::Index i = 0; i < r.size(); ++i) {
                                 c[i] = r[i] * (total - r[i]);
                               }
                               return c;
                             });
}

/// Score term (1/N) sum_i d/dtheta log q(x_i) at fixed x_i = g(z_i); zero in
/// expectation, nonzero per sample.
template <class ModelT>
GradientEstimate score_qp(const ModelT& model, const Matrix& z, const EvalOptions& opts = {}) {
  const int n = static_cast<int>(z.cols());
  if (n < 1) throw UsageError("score_qp: empty batch");
  GradientEstimate est;
  est.id = EstimatorId::Score;
  est.batch_size = n;
  auto shards = detail::shard_ranges(n, opts.workers);
  std::vector<Vector> grads(shards.size());
  std::vector<std::size_t> peaks(shards.size(), 0);
  std::vector<double> surr(shards.size(), 0.0);
  detail::run_sharded(shards, [&](std::size_t si, int start, int len) {
    Matrix zs = z.middleCols(start, len);
    Matrix xbar;
    RowVector log_det;
    model.forward_values(zs, xbar, log_det);
    MemoryMeter meter;
    grads[si] = detail::coefficient_score_grad(model, xbar, RowVector::Constant(len, 1.0 / n),
                                               &meter);
    peaks[si] = meter.peak();
    surr[si] = (model.base_logprob_values(zs) - log_det).sum();
  });
  est.grad = Vector::Zero(model.param_count());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    est.grad += grads[i];
    est.peak_tape_bytes += peaks[i];
    est.loss_surrogate += surr[i];
  }
  est.loss_surrogate /= n;
  est.grad_norm = est.grad.norm();
  return est;
}

/// Reinforce estimator of the forward KL:
/// (1/N) sum_i (wtilde_i / Zhat) d/dtheta log wtilde_i with x_i fixed, where
/// Zhat = (1/N) sum_j wtilde_j over the same batch. Since
/// d/dtheta log wtilde_i = -d/dtheta log q(x_i), this is a score-type pass
/// with coefficients -wtilde_i / sum_j wtilde_j.
template <class ModelT>
GradientEstimate reinf_pq(const ModelT& model, const Target& target, const Matrix& z,
                          const EvalOptions& opts = {}) {
  const int n = static_cast<int>(z.cols());
  if (n < 2) throw UsageError("reinf_pq: need at least two samples");
  GradientEstimate est;
  est.id = EstimatorId::ReinfPQ;
  est.batch_size = n;
  est.log_wtilde.resize(n);
  auto shards = detail::shard_ranges(n, opts.workers);
  std::vector<detail::ShardValues<ModelT>> values(shards.size());
  detail::run_sharded(shards, [&](std::size_t si, int start, int len) {
    values[si] = detail::shard_values(model, target, z.middleCols(start, len));
    est.log_wtilde.segment(start, len) = values[si].log_wtilde;
  });
  RowVector coeff = -normalized_weights(est.log_wtilde);
  std::vector<Vector> grads(shards.size());
  std::vector<std::size_t> peaks(shards.size(), 0);
  detail::run_sharded(shards, [&](std::size_t si, int start, int len) {
    MemoryMeter meter;
    grads[si] = detail::coefficient_score_grad(model, values[si].x, coeff.segment(start, len),
                                               &meter);
    peaks[si] = meter.peak();
  });
  est.grad = Vector::Zero(model.param_count());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    est.grad += grads[i];
    est.peak_tape_bytes += peaks[i];
  }
  est.grad_norm = est.grad.norm();
  est.loss_surrogate = -std::log(reverse_ess(est.log_wtilde));
  return est;
}

/// Dispatch by estimator id. Score ignores the target.
template <class ModelT>
GradientEstimate evaluate_estimator(EstimatorId id, const ModelT& model, const Target& target,
                                    const Matrix& z, const EvalOptions& opts = {}) {
  switch (id) {
    case EstimatorId::RepQP: return rep_qp(model, target, z, opts);
    case EstimatorId::PathQP: return path_qp(model, target, z, opts);
    case EstimatorId::Score: return score_qp(model, z, opts);
    case EstimatorId::ReinfPQ: return reinf_pq(model, target, z, opts);
    case EstimatorId::PathPQ: return path_pq(model, target, z, opts);
    case EstimatorId::ZPathPQ: return zpath_pq(model, target, z, opts);
  }
  throw UsageError("evaluate_estimator: bad id");
}

}  // namespace flowvi
