#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpmlho/cutting_plane.hpp"
#include "cpmlho/data.hpp"
#include "cpmlho/model.hpp"
#include "cpmlho/run_log.hpp"

namespace cpmlho::train {

enum class ThetaMode { Mixed, SingleLevel, Bilevel };
std::string to_string(ThetaMode m);
ThetaMode theta_mode_from_string(const std::string& s);

struct TrainConfig {
  double lr_we = 0.01;
  double lr_wh = 0.01;
  double lr_lambda = 0.003;
  /// Weight of the validation loss in the outer objective.
  double theta = 1.0;
  ThetaMode theta_mode = ThetaMode::Mixed;
  cp::PenaltyConfig penalty;
  /// The cut is still built and logged, but carries no weight.
  bool disable_cuts = false;
  /// When off, w_h1 stays at zero and the layers are plain.
  bool hypernet = true;
  double gate_std = 0.01;
  std::size_t inner_steps_per_outer = 2;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  /// Stop after this many inner steps; 0 means run every epoch out.
  std::size_t max_inner_steps = 0;
  nn::LossKind loss = nn::LossKind::CrossEntropy;
  std::uint64_t seed = 0;
  /// Seed of the train/validation split, kept apart so runs can share data.
  std::uint64_t split_seed = 0;
  double val_fraction = 1.0 / 6.0;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;
  double temperature = 0.5;
  double holes_max = 4.0;
  double length_max = 14.0;
  /// Initial constrained lambda; empty picks the defaults.
  std::vector<double> init_lambda;
  /// Keep lambda fixed: no outer steps, no schedule rows.
  bool fixed_lambda = false;
  /// Chunk size of full-split evaluations.
  std::size_t eval_batch = 1000;
};

/// Throws ConfigError on non-positive rates, negative theta and similar.
void validate(const TrainConfig& config, const nn::ModelSpec& spec);

/// Default constrained lambda: dropout 0.2 everywhere, one hole of length 4.
std::vector<double> default_lambda(const nn::ModelSpec& spec);

struct State {
  nn::Model model;
  nn::HyperParamVector lambda;
};

State init_state(const nn::ModelSpec& spec, const TrainConfig& config);

/// Deterministic seeds for every random draw of a run.
struct SeedPlan {
  std::uint64_t base = 0;
  std::uint64_t init() const;
  std::uint64_t inner_noise(std::size_t step) const;
  std::uint64_t outer_noise(std::size_t step) const;
  std::uint64_t epoch_order(std::size_t epoch) const;
  std::uint64_t outer_train_stream() const;
  std::uint64_t outer_val_stream() const;
};

struct InnerResult {
  double loss = 0.0;
  double phi = 0.0;
};

/// w_e and biases follow the plain loss, w_h1 and w_h2 the penalized loss;
/// lambda is untouched. A null cut means no penalty.
InnerResult inner_step(const Batch& batch, State& state, const cp::Cut* cut, const TrainConfig& config,
                       std::uint64_t noise_seed, std::size_t step = 0);

struct OuterResult {
  double train_loss = 0.0;
  double val_loss = 0.0;
  Tensor grad_train;
  Tensor grad_val;
  Tensor grad_mix;
};

/// Train-mode loss on the training batch, eval-mode loss on the validation
/// batch, both differentiated with respect to raw lambda only.
OuterResult hypergradients(const Batch& train_batch, const Batch& val_batch, const State& state,
                           const TrainConfig& config, std::uint64_t noise_seed, std::size_t step = 0);

/// hypergradients, then raw lambda -= lr_lambda * grad_mix. Weights untouched.
OuterResult outer_step(const Batch& train_batch, const Batch& val_batch, State& state, const TrainConfig& config,
                       std::uint64_t noise_seed, std::size_t step = 0);

struct Metrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Eval-mode loss and accuracy over the listed records.
Metrics evaluate(const State& state, const data::ImageDataset& source, std::span<const std::size_t> indices,
                 const TrainConfig& config);

/// The one place that reads the held-back test set.
class FinalEvaluation {
 public:
  explicit FinalEvaluation(const data::Corpus& corpus) : corpus_(corpus) {}
  Metrics test_metrics(const State& state, const TrainConfig& config) const;

 private:
  const data::Corpus& corpus_;
};

/// Observes the run; called after every outer step and at the end.
struct TrainObserver {
  virtual ~TrainObserver() = default;
  virtual void on_row(const ScheduleRow&) {}
};

struct RunResult {
  RunLog log;
  State state;
};

/// Full alternating run on an already split source. Divergence raises
/// TrainingDivergedError with the partial log attached.
RunResult train_cpmlho(const nn::ModelSpec& spec, const TrainConfig& config, const data::ImageDataset& source,
                       const data::Split& split, const FinalEvaluation* final_eval = nullptr,
                       TrainObserver* observer = nullptr);

/// Splits the corpus training source by config.split_seed and reports test accuracy.
RunResult train_cpmlho(const nn::ModelSpec& spec, const TrainConfig& config, const data::Corpus& corpus,
                       TrainObserver* observer = nullptr);

/// Uniformly sampled fixed lambda per trial, plain layers, no cuts. The
/// inner-step budget of one full run is shared evenly between trials.
RunResult random_search(const nn::ModelSpec& spec, const TrainConfig& config, const data::ImageDataset& source,
                        const data::Split& split, std::size_t trials, const FinalEvaluation* final_eval = nullptr);
RunResult random_search(const nn::ModelSpec& spec, const TrainConfig& config, const data::Corpus& corpus,
                        std::size_t trials);

/// Inner steps one full run takes.
std::size_t full_run_steps(const TrainConfig& config, std::size_t train_records);

}  // namespace cpmlho::train
