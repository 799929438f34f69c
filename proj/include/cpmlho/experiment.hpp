#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpmlho/csv.hpp"
#include "cpmlho/data.hpp"
#include "cpmlho/gradcheck_suite.hpp"
#include "cpmlho/model.hpp"
#include "cpmlho/run_log.hpp"
#include "cpmlho/train.hpp"

namespace cpmlho::experiment {

enum class DataKind { Idx, Synthetic };

struct DataConfig {
  DataKind kind = DataKind::Synthetic;
  /// Directory holding the four standard IDX files (plain or .gz).
  std::string dir;
  std::size_t train_count = 6000;
  std::size_t test_count = 1000;
  std::size_t side = 28;
  std::uint64_t seed = 1;
};

/// Everything a run needs. The JSON form has the sections "model", "data",
/// "train", "penalty", "init_lambda" and "baseline" plus an optional "out".
struct ExperimentConfig {
  nn::ModelSpec model = nn::ModelSpec::mlp();
  DataConfig data;
  train::TrainConfig train;
  /// Initial constrained lambda keyed by name; filled with defaults on parse.
  std::map<std::string, double> init_lambda;
  std::size_t trials = 8;
  std::string out;
};

/// Parses a JSON document. Unknown keys, wrong types and bad values raise
/// ConfigError naming the key and its line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Full document with every default spelled out; parse_config reads it back
/// to the same config.
std::string dump_config(const ExperimentConfig& config);

/// Dotted paths of every numeric setting, e.g. "train.theta" or "init_lambda.dropout0".
std::vector<std::string> sweepable_keys(const ExperimentConfig& config);

/// Copy with one numeric setting replaced. A bare lambda name such as
/// "dropout0" means its initial value. Unknown keys raise ConfigError listing
/// the sweepable ones.
ExperimentConfig with_value(const ExperimentConfig& config, const std::string& key, double value);

/// Model spec for the configured data (image side taken from the data).
nn::ModelSpec resolved_spec(const ExperimentConfig& config, std::size_t image_side);
/// TrainConfig with init_lambda in model index order.
train::TrainConfig resolved_train(const ExperimentConfig& config, const nn::ModelSpec& spec);

data::Corpus load_data(const DataConfig& data);

/// step, epoch, train_loss, val_loss, one column per lambda entry, g, phi.
csv::Table schedule_table(const RunLog& log);
/// One "cpmlho" row: kind, trial, val_loss, val_accuracy, test_accuracy, gap, inner_steps, then lambda.
csv::Table summary_table(const RunLog& log);
/// One "trial" row per random-search trial followed by a "best" row.
csv::Table baseline_table(const RunLog& log);

/// Re-reads a schedule and checks the header, the row count and that every
/// cell is a finite number. Returns the problems found.
std::vector<std::string> check_schedule(const std::filesystem::path& path, const RunLog& log);

struct CommandOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials;
  /// Concurrent runs in a sweep; 0 picks the hardware concurrency.
  std::size_t jobs = 0;
};

/// Exit statuses of the commands.
enum Exit : int { kOk = 0, kFailed = 1, kConfigError = 2, kDiverged = 3, kValidationFailed = 4 };

int cmd_train(const std::filesystem::path& config, const CommandOptions& options, std::ostream& log);
int cmd_baseline(const std::filesystem::path& config, const CommandOptions& options, std::ostream& log);
int cmd_sweep(const std::filesystem::path& config, const std::string& key, const std::vector<double>& values,
              const CommandOptions& options, std::ostream& log);
/// Writes gradcheck.csv into `out`. `extra` ops join the registered ones.
int cmd_gradcheck(std::uint64_t seed, const std::filesystem::path& out, std::ostream& log,
                  const std::vector<check::OpCase>& extra = {});

}  // namespace cpmlho::experiment
