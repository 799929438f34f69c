#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace cpmlho {

/// One outer step.
struct ScheduleRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// Constrained (task-facing) values.
  std::vector<double> lambda;
  double gap = 0.0;
  double phi = 0.0;
  double walltime = 0.0;
};

struct Evaluation {
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  /// NaN unless the run was handed the held-back test set.
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> lambda;
  double gap = 0.0;
};

/// One random-search trial.
struct TrialRecord {
  std::size_t trial = 0;
  std::vector<double> lambda;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunLog {
  std::vector<std::string> lambda_names;
  std::vector<ScheduleRow> rows;
  Evaluation initial;
  Evaluation final;
  std::size_t inner_steps = 0;
  std::vector<TrialRecord> trials;
  std::size_t best_trial = 0;
};

/// Equal in every field except wall-clock time.
bool same_trajectory(const RunLog& a, const RunLog& b);

}  // namespace cpmlho
