// cpmlho: train, baseline, sweep and gradcheck front end.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cpmlho/csv.hpp"
#include "cpmlho/errors.hpp"
#include "cpmlho/experiment.hpp"

namespace ex = cpmlho::experiment;

namespace {

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell.erase(0, cell.find_first_not_of(" \t"));
    cell.erase(cell.find_last_not_of(" \t") + 1);
    out.push_back(cpmlho::csv::parse_number(cell));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel hyperparameter optimization with cutting-plane constrained inner training"};
  app.require_subcommand(1);

  std::string config, out, param, values;
  std::uint64_t seed = 0;
  std::size_t trials = 0, jobs = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON experiment config")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory (overrides \"out\" in the config)");
    cmd->add_option("--seed", seed, "training seed (overrides train.seed)");
  };

  CLI::App* train = app.add_subcommand("train", "one CPMLHO run: schedule.csv, summary.csv, config.json");
  add_common(train);
  CLI::App* baseline = app.add_subcommand("baseline", "random search at the same inner-step budget");
  add_common(baseline);
  baseline->add_option("--trials", trials, "number of random-search trials (overrides baseline.trials)");
  CLI::App* sweep = app.add_subcommand("sweep", "one run per value of a numeric config key, plus sensitivity.csv");
  add_common(sweep);
  sweep->add_option("--param", param, "dotted config key, or a lambda name for its initial value")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--jobs", jobs, "concurrent runs (default: hardware threads)");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and the hypergradient");
  gradcheck->add_option("--seed", seed, "seed of the random check points");
  gradcheck->add_option("--out", out, "report directory")->default_val(".");

  CLI11_PARSE(app, argc, argv);

  ex::CommandOptions options;
  if (!out.empty()) options.out = out;
  options.jobs = jobs;
  auto sub = app.get_subcommands().front();
  if (sub->count("--seed")) options.seed = seed;
  if (sub == baseline && sub->count("--trials")) options.trials = trials;

  if (sub == train) return ex::cmd_train(config, options, std::cout);
  if (sub == baseline) return ex::cmd_baseline(config, options, std::cout);
  if (sub == sweep) {
    std::vector<double> list;
    try {
      list = parse_values(values);
    } catch (const cpmlho::Error& e) {
      std::cerr << "--values: " << e.what() << '\n';
      return ex::kConfigError;
    }
    return ex::cmd_sweep(config, param, list, options, std::cout);
  }
  return ex::cmd_gradcheck(seed, out, std::cout);
}
