#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowvi/flow.hpp"
#include "flowvi/sampling.hpp"
#include "flowvi/training.hpp"

namespace flowvi {

struct TargetConfig {
  int lattice_size = 8;
  double spacing = 1.0;
  double m0 = 2.75;
  double mu2 = -1.0;
  double lambda = 1.0;
};

/// Full run configuration: a sectioned key-value text file. Unknown keys are
/// hard errors so typos cannot silently fall back to defaults, and every run
/// writes the fully resolved document next to its outputs.
struct RunConfig {
  TargetConfig target;
  FlowConfig flow;
  TrainConfig train;
  HmcConfig hmc;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  bool seed_explicit = false;

  // String-typed mirror fields resolved during finalize().
  std::string train_estimator = "PathQP";
  std::string train_switch_estimator;  // empty = no switching
  long train_switch_at_iter = 0;

  static RunConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line, section;
    long lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#' || s[0] == ';') continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw ParseError("config: malformed section header", lineno);
        section = strip(s.substr(1, s.size() - 2));
        if (section != "target" && section != "flow" && section != "train" && section != "hmc" &&
            section != "run") {
          throw ParseError("config: unknown section '" + section + "'", lineno);
        }
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos) throw ParseError("config: expected key = value", lineno);
      if (section.empty()) throw ParseError("config: key outside any section", lineno);
      cfg.apply(section + "." + strip(s.substr(0, eq)), strip(s.substr(eq + 1)), lineno);
    }
    return cfg;
  }

  /// Apply a `section.key=value` override (the CLI --set syntax).
  void apply_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects section.key=value, got '" + kv + "'");
    apply(strip(kv.substr(0, eq)), strip(kv.substr(eq + 1)), 0);
  }

  /// Resolve derived values: seed fallback (NF_SEED), estimator ids, the
  /// per-subsystem seeds. Call once after parsing and overrides.
  void finalize() {
    if (!seed_explicit) {
      if (const char* env = std::getenv("NF_SEED")) {
        seed = std::stoull(env);
        seed_explicit = true;
      }
    }
    flow.lattice_size = target.lattice_size;
    flow.init_seed = RngStream::derive(seed, "flow-init").u64();
    train.seed = seed;
    hmc.seed = RngStream::derive(seed, "hmc").u64();
    train.estimator = estimator_from_name(train_estimator);
    if (!train_switch_estimator.empty()) {
      SwitchRule rule;
      rule.start_estimator = estimator_from_name(train_switch_estimator);
      rule.switch_at_iter = train_switch_at_iter;
      train.switch_rule = rule;
    } else {
      train.switch_rule.reset();
    }
  }

  void write_resolved(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw UsageError("cannot write resolved config: " + path);
    os << serialize();
  }

  std::string serialize() const {
    std::ostringstream os;
    auto num = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    os << "[target]\n";
    os << "lattice_size = " << target.lattice_size << "\n";
    os << "spacing = " << num(target.spacing) << "\n";
    os << "m0 = " << num(target.m0) << "\n";
    os << "mu2 = " << num(target.mu2) << "\n";
    os << "lambda = " << num(target.lambda) << "\n\n";
    os << "[flow]\n";
    os << "coupling_layers = " << flow.coupling_layers << "\n";
    os << "hidden_layers = " << flow.hidden_layers << "\n";
    os << "hidden_width = " << flow.hidden_width << "\n";
    os << "base_stddev = " << num(flow.base_stddev) << "\n";
    os << "scale_clamp = " << num(flow.scale_clamp) << "\n\n";
    os << "[train]\n";
    os << "estimator = " << train_estimator << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "max_iters = " << train.max_iters << "\n";
    os << "lr0 = " << num(train.lr0) << "\n";
    os << "beta1 = " << num(train.beta1) << "\n";
    os << "beta2 = " << num(train.beta2) << "\n";
    os << "adam_eps = " << num(train.adam_eps) << "\n";
    os << "plateau_patience = " << train.plateau_patience << "\n";
    os << "lr_min = " << num(train.lr_min) << "\n";
    os << "lr_factor = " << num(train.lr_factor) << "\n";
    os << "eval_every = " << train.eval_every << "\n";
    os << "eval_batch_size = " << train.eval_batch_size << "\n";
    os << "switch_estimator = " << train_switch_estimator << "\n";
    os << "switch_at_iter = " << train_switch_at_iter << "\n";
    os << "max_wall_ms = " << train.max_wall_ms << "\n\n";
    os << "[hmc]\n";
    os << "n_chains = " << hmc.n_chains << "\n";
    os << "n_steps = " << hmc.n_steps << "\n";
    os << "n_leapfrog = " << hmc.n_leapfrog << "\n";
    os << "step_size = " << num(hmc.step_size) << "\n";
    os << "overrelax_freq = " << hmc.overrelax_freq << "\n";
    os << "burn_in = " << hmc.burn_in << "\n\n";
    os << "[run]\n";
    os << "output_dir = " << output_dir << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
  }

  DoubleWellAction make_target() const {
    return DoubleWellAction(target.lattice_size, target.spacing, target.m0, target.mu2,
                            target.lambda);
  }

  RealNvpFlow make_flow() const { return RealNvpFlow(flow); }

 private:
  static std::string strip(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  void apply(const std::string& full_key, const std::string& value, long lineno) {
    try {
      if (!apply_impl(full_key, value)) {
        throw ParseError("config: unknown key '" + full_key + "'", lineno);
      }
    } catch (const ParseError&) {
      throw;
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError("config: bad value for '" + full_key + "': '" + value + "'", lineno);
    }
  }

  bool apply_impl(const std::string& k, const std::string& v) {
    if (k == "target.lattice_size") target.lattice_size = std::stoi(v);
    else if (k == "target.spacing") target.spacing = std::stod(v);
    else if (k == "target.m0") target.m0 = std::stod(v);
    else if (k == "target.mu2") target.mu2 = std::stod(v);
    else if (k == "target.lambda") target.lambda = std::stod(v);
    else if (k == "flow.coupling_layers") flow.coupling_layers = std::stoi(v);
    else if (k == "flow.hidden_layers") flow.hidden_layers = std::stoi(v);
    else if (k == "flow.hidden_width") flow.hidden_width = std::stoi(v);
    else if (k == "flow.base_stddev") flow.base_stddev = std::stod(v);
    else if (k == "flow.scale_clamp") flow.scale_clamp = std::stod(v);
    else if (k == "train.estimator") train_estimator = v;
    else if (k == "train.batch_size") train.batch_size = std::stoi(v);
    else if (k == "train.max_iters") train.max_iters = std::stol(v);
    else if (k == "train.lr0") train.lr0 = std::stod(v);
    else if (k == "train.beta1") train.beta1 = std::stod(v);
    else if (k == "train.beta2") train.beta2 = std::stod(v);
    else if (k == "train.adam_eps") train.adam_eps = std::stod(v);
    else if (k == "train.plateau_patience") train.plateau_patience = std::stol(v);
    else if (k == "train.lr_min") train.lr_min = std::stod(v);
    else if (k == "train.lr_factor") train.lr_factor = std::stod(v);
    else if (k == "train.eval_every") train.eval_every = std::stol(v);
    else if (k == "train.eval_batch_size") train.eval_batch_size = std::stoi(v);
    else if (k == "train.switch_estimator") train_switch_estimator = v;
    else if (k == "train.switch_at_iter") train_switch_at_iter = std::stol(v);
    else if (k == "train.max_wall_ms") train.max_wall_ms = std::stol(v);
    else if (k == "hmc.n_chains") hmc.n_chains = std::stoi(v);
    else if (k == "hmc.n_steps") hmc.n_steps = std::stoi(v);
    else if (k == "hmc.n_leapfrog") hmc.n_leapfrog = std::stoi(v);
    else if (k == "hmc.step_size") hmc.step_size = std::stod(v);
    else if (k == "hmc.overrelax_freq") hmc.overrelax_freq = std::stoi(v);
    else if (k == "hmc.burn_in") hmc.burn_in = std::stoi(v);
    else if (k == "run.output_dir") output_dir = v;
    else if (k == "run.seed") {
      seed = std::stoull(v);
      seed_explicit = true;
    } else {
      return false;
    }
    return true;
  }
};

}  // namespace flowvi
