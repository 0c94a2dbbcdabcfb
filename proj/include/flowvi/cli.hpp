#pragma once

#include <filesystem>
#include <iostream>

#include "flowvi/config.hpp"
#include "flowvi/diagnostics.hpp"

namespace flowvi {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

namespace detail {

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::parse_file(path);
  for (const auto& kv : overrides) cfg.apply_override(kv);
  cfg.finalize();
  return cfg;
}

inline void prepare_output_dir(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  cfg.write_resolved(cfg.output_dir + "/resolved.cfg");
}

}  // namespace detail

/// `train`: run the optimization loop described by the config, writing
/// metrics.csv, checkpoint.ckpt and the resolved config into the output dir.
inline int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
                     int workers = 1) {
  RunConfig cfg;
  try {
    cfg = detail::load_config(config_path, overrides);
    detail::prepare_output_dir(cfg);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    cfg.train.workers = workers;
    RealNvpFlow flow = cfg.make_flow();
    DoubleWellAction target = cfg.make_target();
    TrainResult res = train(flow, target, cfg.train, cfg.output_dir + "/metrics.csv",
                            cfg.output_dir + "/checkpoint.ckpt");
    std::cout << "train: " << res.iterations_run << " iterations, final reverse ESS "
              << res.final_reverse_ess << ", skipped " << res.skipped_batches << " batches\n";
    return kExitOk;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

/// `hmc`: generate ground-truth samples of the configured double-well target
/// and write them in the binary dump format plus a text summary.
inline int cmd_hmc(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  try {
    cfg = detail::load_config(config_path, overrides);
    detail::prepare_output_dir(cfg);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    DoubleWellAction target = cfg.make_target();
    HmcResult res = hmc_sample(target, cfg.target.lattice_size, cfg.hmc);
    write_sample_dump(cfg.output_dir + "/hmc_samples.bin", res.samples);
    long positive = 0;
    for (Eigen::Index r = 0; r < res.samples.rows(); ++r) {
      if (res.samples.row(r).mean() > 0.0) ++positive;
    }
    const double occupancy = static_cast<double>(positive) / res.samples.rows();
    write_report(cfg.output_dir + "/hmc_summary.txt",
                 {{"samples", std::to_string(res.samples.rows())},
                  {"dim", std::to_string(res.samples.cols())},
                  {"acceptance_rate", std::to_string(res.acceptance_rate)},
                  {"tuned_step_size", std::to_string(res.tuned_step_size)},
                  {"well_occupancy_positive", std::to_string(occupancy)},
                  {"chain_restarts", std::to_string(res.restarts)},
                  {"overrelax_rejects", std::to_string(res.overrelax_rejects)},
                  {"seed", std::to_string(cfg.hmc.seed)}});
    std::cout << "hmc: " << res.samples.rows() << " samples, acceptance " << res.acceptance_rate
              << ", step size " << res.tuned_step_size << ", +well occupancy " << occupancy
              << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "hmc failure: " << e.what() << "\n";
    return kExitNumeric;
  }
}

/// Reverse (and, given a ground-truth dump, forward) ESS of a checkpointed
/// model against the configured target. Flags a forward/reverse discrepancy
/// as suspected mode collapse.
struct EvalOutcome {
  EssReport report;
  bool collapse_flag = false;
};

inline EvalOutcome evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                                       const std::string& hmc_dump_path, int n_q_samples) {
  if (n_q_samples < 2) throw UsageError("eval: need at least two flow samples");
  RealNvpFlow flow = RealNvpFlow::load(checkpoint_path);
  DoubleWellAction target(cfg.target.lattice_size, cfg.target.spacing, cfg.target.m0,
                          cfg.target.mu2, cfg.target.lambda);
  if (flow.dim() != cfg.target.lattice_size) {
    throw UsageError("eval: checkpoint lattice size does not match target config");
  }
  EssReport rep;
  rep.q_seed = RngStream::derive(cfg.seed, "eval-q").u64();
  RngStream q_rng(rep.q_seed);
  auto batch = draw_weighted_batch(flow, target, n_q_samples, q_rng);
  rep.n_q_samples = n_q_samples;
  rep.reverse_ess = reverse_ess(batch.log_wtilde);
  rep.z_hat = z_hat(batch.log_wtilde);
  RngStream boot = RngStream::derive(cfg.seed, "eval-bootstrap");
  auto rev_iv = bootstrap_interval(
      batch.log_wtilde, [](const RowVector& lw) { return reverse_ess(lw); }, boot);
  rep.reverse_lo = rev_iv.first;
  rep.reverse_hi = rev_iv.second;
  EvalOutcome out;
  if (!hmc_dump_path.empty()) {
    Matrix p_samples = read_sample_dump(hmc_dump_path);  // rows = samples
    if (p_samples.cols() != flow.dim()) {
      throw UsageError("eval: HMC dump dimension does not match the model");
    }
    Matrix xp = p_samples.transpose();
    RowVector lw_p = -target.action_values(xp) - flow.log_prob_values(xp);
    rep.n_p_samples = p_samples.rows();
    const double lzh = log_z_hat(batch.log_wtilde);
    rep.forward_ess = forward_ess(lw_p, lzh);
    auto fw_iv = bootstrap_interval(
        lw_p, [&](const RowVector& lw) { return forward_ess(lw, lzh); }, boot);
    rep.forward_lo = fw_iv.first;
    rep.forward_hi = fw_iv.second;
    out.collapse_flag = *rep.forward_ess < 0.6 * rep.reverse_ess;
  }
  out.report = rep;
  return out;
}

inline int cmd_eval(const std::string& config_path, const std::string& checkpoint_path,
                    const std::string& hmc_dump_path, int n_q_samples,
                    const std::vector<std::string>& overrides) {
  RunConfig cfg;
  try {
    cfg = detail::load_config(config_path, overrides);
    if (n_q_samples < 2) throw UsageError("eval: n-q-samples must be >= 2");
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    EvalOutcome out;
    try {
      out = evaluate_checkpoint(cfg, checkpoint_path, hmc_dump_path, n_q_samples);
    } catch (const UsageError& e) {
      std::cerr << "eval error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const ParseError& e) {
      std::cerr << "eval error: " << e.what() << "\n";
      return kExitUsage;
    }
    const EssReport& r = out.report;
    std::cout << "reverse_ess: " << r.reverse_ess << " (68% interval " << r.reverse_lo << " .. "
              << r.reverse_hi << ", n_q " << r.n_q_samples << ")\n";
    std::cout << "z_hat: " << r.z_hat << "\n";
    if (r.forward_ess) {
      std::cout << "forward_ess: " << *r.forward_ess << " (68% interval " << r.forward_lo
                << " .. " << r.forward_hi << ", n_p " << r.n_p_samples << ")\n";
      std::cout << "mode_collapse_suspected: " << (out.collapse_flag ? "yes" : "no") << "\n";
    } else {
      std::cerr << "warning: no HMC dump supplied, forward ESS skipped\n";
    }
    std::filesystem::create_directories(cfg.output_dir);
    std::vector<std::pair<std::string, std::string>> fields = {
        {"checkpoint", checkpoint_path},
        {"reverse_ess", std::to_string(r.reverse_ess)},
        {"reverse_lo", std::to_string(r.reverse_lo)},
        {"reverse_hi", std::to_string(r.reverse_hi)},
        {"z_hat", std::to_string(r.z_hat)},
        {"n_q_samples", std::to_string(r.n_q_samples)},
        {"q_seed", std::to_string(r.q_seed)}};
    if (r.forward_ess) {
      fields.push_back({"forward_ess", std::to_string(*r.forward_ess)});
      fields.push_back({"forward_lo", std::to_string(r.forward_lo)});
      fields.push_back({"forward_hi", std::to_string(r.forward_hi)});
      fields.push_back({"n_p_samples", std::to_string(r.n_p_samples)});
      fields.push_back({"mode_collapse_suspected", out.collapse_flag ? "yes" : "no"});
    }
    write_report(cfg.output_dir + "/ess_report.txt", fields);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "eval failure: " << e.what() << "\n";
    return kExitNumeric;
  }
}

/// `compare`: train each requested estimator under the walltime-fairness
/// rule (the non-path baselines RepQP and ReinfPQ get twice the iteration
/// budget), then tabulate final forward/reverse ESS with bootstrap intervals
/// and emit gradient-norm plot data. Per-estimator failures are recorded as
/// NaN rows and the sweep continues.
inline int cmd_compare(const std::string& config_path, const std::vector<std::string>& estimators,
                       const std::vector<std::string>& overrides, int workers = 1) {
  RunConfig cfg;
  std::vector<EstimatorId> ids;
  try {
    cfg = detail::load_config(config_path, overrides);
    if (estimators.empty()) throw UsageError("compare: estimator list must not be empty");
    for (const auto& name : estimators) ids.push_back(estimator_from_name(name));
    detail::prepare_output_dir(cfg);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::ofstream table(cfg.output_dir + "/comparison.csv");
  table << "estimator,iterations,reverse_ess,reverse_lo,reverse_hi,forward_ess,forward_lo,"
           "forward_hi,wall_ms,status\n";
  // A shared ground-truth dump for the forward column.
  std::string dump_path = cfg.output_dir + "/hmc_samples.bin";
  try {
    DoubleWellAction target = cfg.make_target();
    HmcResult hmc = hmc_sample(target, cfg.target.lattice_size, cfg.hmc);
    write_sample_dump(dump_path, hmc.samples);
  } catch (const std::exception& e) {
    std::cerr << "compare: HMC ground truth failed (" << e.what() << "), forward column NaN\n";
    dump_path.clear();
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string name = estimator_name(ids[i]);
    RunConfig run_cfg = cfg;
    run_cfg.train.estimator = ids[i];
    run_cfg.train_estimator = name;
    const bool baseline = ids[i] == EstimatorId::RepQP || ids[i] == EstimatorId::ReinfPQ;
    if (baseline) run_cfg.train.max_iters *= 2;
    run_cfg.train.workers = workers;
    run_cfg.output_dir = cfg.output_dir + "/" + name;
    std::filesystem::create_directories(run_cfg.output_dir);
    run_cfg.write_resolved(run_cfg.output_dir + "/resolved.cfg");
    std::string status = "ok";
    double rev = std::numeric_limits<double>::quiet_NaN(), rev_lo = rev, rev_hi = rev;
    double fw = rev, fw_lo = rev, fw_hi = rev, wall = rev;
    long iters = 0;
    try {
      RealNvpFlow flow = run_cfg.make_flow();
      DoubleWellAction target = run_cfg.make_target();
      TrainResult res = train(flow, target, run_cfg.train, run_cfg.output_dir + "/metrics.csv",
                              run_cfg.output_dir + "/checkpoint.ckpt");
      iters = res.iterations_run;
      wall = res.metrics.empty() ? 0.0 : res.metrics.back().wall_ms;
      EvalOutcome out = evaluate_checkpoint(run_cfg, run_cfg.output_dir + "/checkpoint.ckpt",
                                            dump_path, run_cfg.train.eval_batch_size);
      rev = out.report.reverse_ess;
      rev_lo = out.report.reverse_lo;
      rev_hi = out.report.reverse_hi;
      if (out.report.forward_ess) {
        fw = *out.report.forward_ess;
        fw_lo = out.report.forward_lo;
        fw_hi = out.report.forward_hi;
      }
    } catch (const std::exception& e) {
      status = std::string("failed: ") + e.what();
    }
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%ld,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%s", name.c_str(),
                  iters, rev, rev_lo, rev_hi, fw, fw_lo, fw_hi, wall, status.c_str());
    table << buf << "\n";
    if (status == "ok") {
      try {
        gradnorm_trace(run_cfg.output_dir + "/metrics.csv",
                       run_cfg.output_dir + "/gradnorm_trace.csv");
      } catch (const std::exception& e) {
        std::cerr << "compare: gradnorm trace for " << name << " failed: " << e.what() << "\n";
      }
    }
    std::cout << "compare: " << name << " -> " << status << " (rev " << rev << ", fw " << fw
              << ")\n";
  }
  return kExitOk;
}

}  // namespace flowvi
