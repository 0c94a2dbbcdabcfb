#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowvi/estimators.hpp"
#include "flowvi/flow.hpp"

namespace flowvi {

struct SwitchRule {
  EstimatorId start_estimator = EstimatorId::PathPQ;
  long switch_at_iter = 0;  // iterations [1, switch_at_iter] use start_estimator
};

struct TrainConfig {
  EstimatorId estimator = EstimatorId::PathQP;
  int batch_size = 4000;
  long max_iters = 100000;
  double lr0 = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long plateau_patience = 3000;  // monitored-loss updates without improvement
  double lr_min = 1e-7;
  double lr_factor = 0.5;
  std::uint64_t seed = 0;
  long eval_every = 1000;
  int eval_batch_size = 4000;
  std::optional<SwitchRule> switch_rule;
  long max_wall_ms = 0;  // 0 disables the wall-clock budget
  int workers = 1;

  void validate() const {
    if (batch_size < 2) throw UsageError("train: batch size must be >= 2");
    if (lr_min > lr0) throw UsageError("train: lr_min must be <= lr0");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
      throw UsageError("train: betas must lie in (0, 1)");
    }
    if (max_iters < 1 || eval_every < 1) throw UsageError("train: iteration counts must be >= 1");
  }
};

/// Optimizer + schedule state. Serialized with checkpoints so a resumed run
/// continues the exact trajectory.
struct TrainState {
  Vector m, v;
  long step = 0;
  double lr = 0.0;
  double best_loss = std::numeric_limits<double>::infinity();
  long plateau_count = 0;
  long skipped_batches = 0;
  RngStream batch_rng, eval_rng;

  static TrainState fresh(Eigen::Index n_params, const TrainConfig& cfg) {
    TrainState st;
    st.m = Vector::Zero(n_params);
    st.v = Vector::Zero(n_params);
    st.lr = cfg.lr0;
    st.batch_rng = RngStream::derive(cfg.seed, "train-batch");
    st.eval_rng = RngStream::derive(cfg.seed, "train-eval");
    return st;
  }
};

/// One bias-corrected Adam update. Non-finite gradients skip the step and
/// bump the skip counter instead of poisoning the moments.
inline bool adam_step(TrainState& st, Vector& theta, const Vector& grad, const TrainConfig& cfg) {
  if (!grad.allFinite()) {
    ++st.skipped_batches;
    return false;
  }
  ++st.step;
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  Vector mhat = st.m / c1;
  Vector vhat = st.v / c2;
  theta.array() -= st.lr * mhat.array() / (vhat.array().sqrt() + cfg.adam_eps);
  return true;
}

/// Reduce-on-plateau: when the monitored loss has not improved on the best
/// value for `plateau_patience` consecutive updates, multiply the learning
/// rate by lr_factor (floored at lr_min) and restart the counter.
inline void plateau_schedule(TrainState& st, double loss, const TrainConfig& cfg) {
  if (loss < st.best_loss) {
    st.best_loss = loss;
    st.plateau_count = 0;
    return;
  }
  ++st.plateau_count;
  if (st.plateau_count >= cfg.plateau_patience) {
    st.lr = std::max(st.lr * cfg.lr_factor, cfg.lr_min);
    st.plateau_count = 0;
  }
}

struct MetricsRow {
  long iter = 0;
  double wall_ms = 0.0;
  double loss_surrogate = 0.0;
  double grad_norm = 0.0;
  double reverse_ess = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  std::string estimator_id;
};

inline constexpr const char* kMetricsHeader =
    "iter,wall_ms,loss_surrogate,grad_norm,reverse_ess,lr,estimator_id";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%s", r.iter, r.wall_ms,
                r.loss_surrogate, r.grad_norm, r.reverse_ess, r.lr, r.estimator_id.c_str());
  return buf;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open metrics CSV: " + path);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("metrics CSV is empty: " + path, 1);
  if (line != kMetricsHeader) throw ParseError("metrics CSV: unexpected header", 1);
  std::vector<MetricsRow> rows;
  long lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MetricsRow r;
    try {
      std::getline(ss, field, ',');
      r.iter = std::stol(field);
      std::getline(ss, field, ',');
      r.wall_ms = std::stod(field);
      std::getline(ss, field, ',');
      r.loss_surrogate = std::stod(field);
      std::getline(ss, field, ',');
      r.grad_norm = std::stod(field);
      std::getline(ss, field, ',');
      r.reverse_ess = std::stod(field);
      std::getline(ss, field, ',');
      r.lr = std::stod(field);
      if (!std::getline(ss, r.estimator_id, ',')) throw std::invalid_argument("missing field");
    } catch (const std::exception&) {
      throw ParseError("metrics CSV: malformed row", lineno);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- train checkpoints (flow format + optimizer state appended) -------------

inline void save_train_checkpoint(const std::string& path, const RealNvpFlow& flow,
                                  const TrainState& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open checkpoint for writing: " + path);
  flow.write_header(os);
  detail::write_f64_array(os, flow.params().data(), static_cast<std::size_t>(flow.params().size()));
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "ADAM v1\nstep: %ld\nlr: %a\nbest_loss: %a\nplateau_count: %ld\n"
                "skipped_batches: %ld\nEND\n",
                st.step, st.lr, st.best_loss, st.plateau_count, st.skipped_batches);
  os << buf;
  st.batch_rng.save(os);
  st.eval_rng.save(os);
  detail::write_f64_array(os, st.m.data(), static_cast<std::size_t>(st.m.size()));
  detail::write_f64_array(os, st.v.data(), static_cast<std::size_t>(st.v.size()));
  if (!os) throw UsageError("checkpoint write failed: " + path);
}

inline std::pair<RealNvpFlow, TrainState> load_train_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint: " + path);
  RealNvpFlow flow = RealNvpFlow::read_header(is);
  detail::read_f64_array(is, flow.params().data(), static_cast<std::size_t>(flow.params().size()));
  std::string line;
  if (!std::getline(is, line) || line != "ADAM v1") throw ParseError("checkpoint: missing ADAM section");
  TrainState st;
  auto read_kv = [&](const char* key) {
    if (!std::getline(is, line)) throw ParseError("checkpoint: truncated ADAM section");
    auto colon = line.find(": ");
    if (colon == std::string::npos || line.substr(0, colon) != key) {
      throw ParseError(std::string("checkpoint: expected key '") + key + "'");
    }
    return line.substr(colon + 2);
  };
  st.step = std::stol(read_kv("step"));
  st.lr = std::strtod(read_kv("lr").c_str(), nullptr);
  st.best_loss = std::strtod(read_kv("best_loss").c_str(), nullptr);
  st.plateau_count = std::stol(read_kv("plateau_count"));
  st.skipped_batches = std::stol(read_kv("skipped_batches"));
  if (!std::getline(is, line) || line != "END") throw ParseError("checkpoint: missing ADAM END");
  st.batch_rng.restore(is);
  st.eval_rng.restore(is);
  is.ignore(1);  // newline after rng state
  st.m.resize(flow.params().size());
  st.v.resize(flow.params().size());
  detail::read_f64_array(is, st.m.data(), static_cast<std::size_t>(st.m.size()));
  detail::read_f64_array(is, st.v.data(), static_cast<std::size_t>(st.v.size()));
  return {std::move(flow), std::move(st)};
}

// ---- training loop -----------------------------------------------------------

struct TrainResult {
  std::vector<MetricsRow> metrics;
  long iterations_run = 0;
  long skipped_batches = 0;
  double final_reverse_ess = std::numeric_limits<double>::quiet_NaN();
  bool wall_budget_hit = false;
};

inline bool is_qp_estimator(EstimatorId id) {
  return id == EstimatorId::RepQP || id == EstimatorId::PathQP || id == EstimatorId::Score;
}

/// Optimization loop: sample a base batch, evaluate the chosen estimator,
/// Adam-update, drive the plateau schedule, periodically measure reverse ESS
/// on a held-out batch and checkpoint. The plateau monitor is the reverse-KL
/// surrogate for qp-estimators (every iteration) and -log(reverse ESS) on the
/// eval batch for pq-estimators (every evaluation). Estimator switching keeps
/// the Adam moments so the trajectory stays continuous across the switch.
template <class TargetT>
TrainResult train(RealNvpFlow& model, const TargetT& target, const TrainConfig& cfg,
                  const std::string& metrics_path = "", const std::string& checkpoint_path = "",
                  TrainState* state_out = nullptr) {
  cfg.validate();
  TrainState st = TrainState::fresh(model.param_count(), cfg);
  TrainResult res;
  std::ofstream metrics_os;
  if (!metrics_path.empty()) {
    metrics_os.open(metrics_path);
    if (!metrics_os) throw UsageError("cannot open metrics file: " + metrics_path);
    metrics_os << kMetricsHeader << '\n';
  }
  EvalOptions opts;
  opts.workers = cfg.workers;
  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };
  int consecutive_failures = 0;
  double last_eval_ess = std::numeric_limits<double>::quiet_NaN();
  for (long iter = 1; iter <= cfg.max_iters; ++iter) {
    if (cfg.max_wall_ms > 0 && wall_ms() > static_cast<double>(cfg.max_wall_ms)) {
      res.wall_budget_hit = true;
      break;
    }
    EstimatorId id = cfg.estimator;
    if (cfg.switch_rule && iter <= cfg.switch_rule->switch_at_iter) {
      id = cfg.switch_rule->start_estimator;
    }
    Matrix z = model.sample_base(st.batch_rng, cfg.batch_size);
    GradientEstimate est;
    try {
      est = evaluate_estimator(id, model, target, z, opts);
    } catch (const NumericError& e) {
      ++st.skipped_batches;
      ++consecutive_failures;
      std::cerr << "[train] iter " << iter << ": skipped batch (" << e.what() << ")\n";
      if (consecutive_failures > 10) {
        throw NumericError("train: more than 10 consecutive numeric failures at iter " +
                           std::to_string(iter));
      }
      continue;
    }
    consecutive_failures = 0;
    adam_step(st, model.params(), est.grad, cfg);
    if (is_qp_estimator(id)) plateau_schedule(st, est.loss_surrogate, cfg);

    const bool eval_now = (iter == 1) || (iter % cfg.eval_every == 0) || (iter == cfg.max_iters);
    if (eval_now) {
      auto batch = draw_weighted_batch(model, target, cfg.eval_batch_size, st.eval_rng);
      last_eval_ess = reverse_ess(batch.log_wtilde);
      if (!is_qp_estimator(id)) plateau_schedule(st, -std::log(last_eval_ess), cfg);
      if (!checkpoint_path.empty()) save_train_checkpoint(checkpoint_path, model, st);
    }
    MetricsRow row;
    row.iter = iter;
    row.wall_ms = wall_ms();
    row.loss_surrogate = est.loss_surrogate;
    row.grad_norm = est.grad_norm;
    row.reverse_ess = last_eval_ess;
    row.lr = st.lr;
    row.estimator_id = estimator_name(id);
    if (metrics_os.is_open()) metrics_os << format_metrics_row(row) << '\n';
    res.metrics.push_back(std::move(row));
    res.iterations_run = iter;
  }
  res.skipped_batches = st.skipped_batches;
  res.final_reverse_ess = last_eval_ess;
  if (!checkpoint_path.empty()) save_train_checkpoint(checkpoint_path, model, st);
  if (state_out != nullptr) *state_out = std::move(st);
  return res;
}

// ---- timing probe --------------------------------------------------------------

struct TimingReport {
  std::map<EstimatorId, double> median_ms;
};

/// Median wall time per gradient evaluation for the five training estimators
/// at a fixed batch size.
template <class ModelT>
TimingReport timing_probe(const ModelT& model, const Target& target, int batch_size, int reps,
                          std::uint64_t seed = 17) {
  TimingReport rep;
  RngStream rng(seed);
  Matrix z = model.sample_base(rng, batch_size);
  const EstimatorId ids[] = {EstimatorId::RepQP, EstimatorId::PathQP, EstimatorId::ReinfPQ,
                             EstimatorId::PathPQ, EstimatorId::ZPathPQ};
  for (EstimatorId id : ids) {
    (void)evaluate_estimator(id, model, target, z);  // warm-up
    std::vector<double> ms;
    ms.reserve(reps);
    for (int r = 0; r < reps; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      (void)evaluate_estimator(id, model, target, z);
      ms.push_back(
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count());
    }
    std::sort(ms.begin(), ms.end());
    rep.median_ms[id] = ms[ms.size() / 2];
  }
  return rep;
}

}  // namespace flowvi
