#include <CLI11.hpp>
#include <string>
#include <thread>
#include <vector>

#include "flowvi/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow variational inference with path-gradient estimators"};
  app.require_subcommand(1);

  int workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  app.add_option("--workers", workers,
                 "worker threads for batch sharding (determinism guaranteed at 1)");

  std::string config_path;
  std::vector<std::string> overrides;

  auto* train = app.add_subcommand("train", "train a flow on the configured double-well target");
  train->add_option("config", config_path, "run config file")->required();
  train->add_option("--set", overrides, "override a config value as section.key=value");

  auto* hmc = app.add_subcommand("hmc", "generate ground-truth samples with overrelaxed HMC");
  hmc->add_option("config", config_path, "run config file")->required();
  hmc->add_option("--set", overrides, "override a config value as section.key=value");

  std::string checkpoint_path, hmc_dump;
  int n_q_samples = 100000;
  auto* eval = app.add_subcommand("eval", "compute forward/reverse ESS for a checkpoint");
  eval->add_option("config", config_path, "run config file")->required();
  eval->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
  eval->add_option("--hmc-dump", hmc_dump, "ground-truth sample dump (enables forward ESS)");
  eval->add_option("--n-q-samples", n_q_samples, "flow samples for reverse ESS and Z-hat");
  eval->add_option("--set", overrides, "override a config value as section.key=value");

  std::vector<std::string> estimators;
  auto* compare = app.add_subcommand("compare", "walltime-fair estimator comparison sweep");
  compare->add_option("config", config_path, "run config file")->required();
  compare->add_option("--estimators", estimators, "estimator names to compare")
      ->expected(-1)
      ->required();
  compare->add_option("--set", overrides, "override a config value as section.key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : flowvi::kExitUsage;
  }

  if (train->parsed()) return flowvi::cmd_train(config_path, overrides, workers);
  if (hmc->parsed()) return flowvi::cmd_hmc(config_path, overrides);
  if (eval->parsed()) {
    return flowvi::cmd_eval(config_path, checkpoint_path, hmc_dump, n_q_samples, overrides);
  }
  if (compare->parsed()) return flowvi::cmd_compare(config_path, estimators, overrides, workers);
  return flowvi::kExitUsage;
}
