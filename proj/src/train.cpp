#include "cpmlho/train.hpp"

#include <chrono>
#include <cmath>
#include <memory>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/rng.hpp"

namespace cpmlho {

bool same_trajectory(const RunLog& a, const RunLog& b) {
  auto same_eval = [](const Evaluation& x, const Evaluation& y) {
    auto eq = [](double p, double q) { return (std::isnan(p) && std::isnan(q)) || p == q; };
    return eq(x.val_loss, y.val_loss) && eq(x.val_accuracy, y.val_accuracy) &&
           eq(x.test_accuracy, y.test_accuracy) && x.lambda == y.lambda && x.gap == y.gap;
  };
  if (a.lambda_names != b.lambda_names || a.rows.size() != b.rows.size() || a.inner_steps != b.inner_steps ||
      a.best_trial != b.best_trial || a.trials.size() != b.trials.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &r = a.rows[i], &s = b.rows[i];
    if (r.step != s.step || r.epoch != s.epoch || r.train_loss != s.train_loss || r.val_loss != s.val_loss ||
        r.lambda != s.lambda || r.gap != s.gap || r.phi != s.phi) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    const auto &r = a.trials[i], &s = b.trials[i];
    if (r.trial != s.trial || r.lambda != s.lambda || r.val_loss != s.val_loss || r.val_accuracy != s.val_accuracy) {
      return false;
    }
  }
  return same_eval(a.initial, b.initial) && same_eval(a.final, b.final);
}

}  // namespace cpmlho

namespace cpmlho::train {

namespace {

enum SeedTag : std::uint64_t { kInit = 1, kInner, kOuter, kEpoch, kOuterTrain, kOuterVal, kTrials };

bool all_finite(const Tensor& t) { return t.all_finite(); }

void clip_global(std::vector<Tensor*>& grads, double clip) {
  if (clip <= 0.0) return;
  double sq = 0.0;
  for (const Tensor* g : grads) sq += dot(*g, *g);
  const double norm = std::sqrt(sq);
  if (norm <= clip) return;
  for (Tensor* g : grads) {
    for (double& v : g->data()) v *= clip / norm;
  }
}

}  // namespace

std::string to_string(ThetaMode m) {
  switch (m) {
    case ThetaMode::Mixed: return "mixed";
    case ThetaMode::SingleLevel: return "single_level";
    case ThetaMode::Bilevel: return "bilevel";
  }
  return "mixed";
}

ThetaMode theta_mode_from_string(const std::string& s) {
  if (s == "mixed") return ThetaMode::Mixed;
  if (s == "single_level") return ThetaMode::SingleLevel;
  if (s == "bilevel") return ThetaMode::Bilevel;
  throw ConfigError("theta_mode must be mixed, single_level or bilevel, not '" + s + "'");
}

std::uint64_t SeedPlan::init() const { return derive_seed(base, kInit); }
std::uint64_t SeedPlan::inner_noise(std::size_t step) const { return derive_seed(base, kInner, step); }
std::uint64_t SeedPlan::outer_noise(std::size_t step) const { return derive_seed(base, kOuter, step); }
std::uint64_t SeedPlan::epoch_order(std::size_t epoch) const { return derive_seed(base, kEpoch, epoch); }
std::uint64_t SeedPlan::outer_train_stream() const { return derive_seed(base, kOuterTrain); }
std::uint64_t SeedPlan::outer_val_stream() const { return derive_seed(base, kOuterVal); }

std::vector<double> default_lambda(const nn::ModelSpec& spec) {
  std::vector<double> v(spec.num_hyper(), 0.2);
  if (spec.cutout) {
    v[spec.cutout->holes_index] = 1.0;
    v[spec.cutout->length_index] = 4.0;
  }
  return v;
}

void validate(const TrainConfig& c, const nn::ModelSpec& spec) {
  auto positive = [](double v, const char* name) {
    if (!std::isfinite(v) || v <= 0.0) throw ConfigError(std::string(name) + " must be positive and finite");
  };
  positive(c.lr_we, "lr_we");
  positive(c.lr_wh, "lr_wh");
  positive(c.lr_lambda, "lr_lambda");
  positive(c.temperature, "temperature");
  positive(c.holes_max, "holes_max");
  positive(c.length_max, "length_max");
  if (!std::isfinite(c.theta) || c.theta < 0.0) throw ConfigError("theta must be finite and >= 0");
  if (!std::isfinite(c.grad_clip) || c.grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  if (c.inner_steps_per_outer == 0) throw ConfigError("inner_steps_per_outer must be at least 1");
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (c.eval_batch == 0) throw ConfigError("eval_batch must be at least 1");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  cp::validate(c.penalty);
  nn::validate_spec(spec);
  if (spec.cutout && c.length_max > static_cast<double>(spec.image_side)) {
    throw ConfigError("length_max exceeds the image side");
  }
  if (!c.init_lambda.empty()) {
    const auto specs = spec.hyper_specs(c.holes_max, c.length_max);
    if (c.init_lambda.size() != specs.size()) {
      throw ConfigError("init_lambda has " + std::to_string(c.init_lambda.size()) + " entries, the model needs " +
                        std::to_string(specs.size()));
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (!(c.init_lambda[i] > 0.0 && c.init_lambda[i] < specs[i].upper)) {
        throw ConfigError("init_lambda entry " + specs[i].name + " must lie in (0, " + std::to_string(specs[i].upper) +
                          ")");
      }
    }
  }
}

State init_state(const nn::ModelSpec& spec, const TrainConfig& config) {
  Rng rng(SeedPlan{config.seed}.init());
  nn::Model model = nn::init_model(spec, rng, {config.gate_std, config.hypernet});
  const auto values = config.init_lambda.empty() ? default_lambda(spec) : config.init_lambda;
  return {std::move(model),
          nn::HyperParamVector::from_constrained(spec.hyper_specs(config.holes_max, config.length_max), values)};
}

InnerResult inner_step(const Batch& batch, State& state, const cp::Cut* cut, const TrainConfig& config,
                       std::uint64_t noise_seed, std::size_t step) {
  ad::Tape tape;
  nn::ModelVars vars = nn::bind(tape, state.model, state.lambda, {true, false});
  Rng noise(noise_seed);
  ad::Var loss = nn::inner_loss(state.model, vars, state.lambda, batch, config.loss, {true, config.temperature}, noise);
  InnerResult out{loss.value().item(), 0.0};
  if (!std::isfinite(out.loss)) throw TrainingDivergedError("inner loss is not finite", step);

  const Tensor* live = config.penalty.live_lambda ? &state.lambda.raw() : nullptr;
  ad::Var total = loss;
  if (cut != nullptr && !config.disable_cuts && config.penalty.mu > 0.0) {
    // w_e enters the cut as a constant: its update follows the plain loss
    std::vector<nn::HyperLayerVars> cut_vars;
    for (const auto& l : vars.layers) {
      cut_vars.push_back({tape.constant(l.w_e.value()), l.bias, l.w_h1, l.w_h2});
    }
    ad::Var phi = cut->evaluate(cut_vars, live);
    out.phi = phi.value().item();
    total = loss + config.penalty.mu * phi;
  } else if (cut != nullptr) {
    out.phi = cut->evaluate(state.model.layers, live);
  }

  ad::Gradients g = ad::backward(tape, total);
  std::vector<Tensor> grads;
  for (const auto& l : vars.layers) {
    for (ad::Var v : {l.w_e, l.bias, l.w_h1, l.w_h2}) grads.push_back(g[v]);
  }
  std::vector<Tensor*> ptrs;
  for (auto& t : grads) {
    if (!all_finite(t)) throw TrainingDivergedError("inner gradient is not finite", step);
    ptrs.push_back(&t);
  }
  clip_global(ptrs, config.grad_clip);
  for (std::size_t i = 0; i < state.model.layers.size(); ++i) {
    auto& l = state.model.layers[i];
    l.w_e.axpy_(-config.lr_we, grads[4 * i]);
    l.bias.axpy_(-config.lr_we, grads[4 * i + 1]);
    if (config.hypernet) {
      l.w_h1.axpy_(-config.lr_wh, grads[4 * i + 2]);
      l.w_h2.axpy_(-config.lr_wh, grads[4 * i + 3]);
    }
  }
  return out;
}

OuterResult hypergradients(const Batch& train_batch, const Batch& val_batch, const State& state,
                           const TrainConfig& config, std::uint64_t noise_seed, std::size_t step) {
  ad::Tape tape;
  nn::ModelVars vars = nn::bind(tape, state.model, state.lambda, {false, true});
  Rng noise(noise_seed);
  ad::Var l_tr =
      nn::inner_loss(state.model, vars, state.lambda, train_batch, config.loss, {true, config.temperature}, noise);
  ad::Var l_val =
      nn::inner_loss(state.model, vars, state.lambda, val_batch, config.loss, {false, config.temperature}, noise);
  OuterResult out;
  out.train_loss = l_tr.value().item();
  out.val_loss = l_val.value().item();
  if (!std::isfinite(out.train_loss) || !std::isfinite(out.val_loss)) {
    throw TrainingDivergedError("outer loss is not finite", step);
  }
  out.grad_train = ad::backward(tape, l_tr)[vars.lambda_raw];
  out.grad_val = ad::backward(tape, l_val)[vars.lambda_raw];
  // backprop is linear, so the mixed gradient is the same combination
  switch (config.theta_mode) {
    case ThetaMode::SingleLevel: out.grad_mix = out.grad_train; break;
    case ThetaMode::Bilevel: out.grad_mix = out.grad_val; break;
    case ThetaMode::Mixed:
      out.grad_mix = out.grad_train;
      if (config.theta != 0.0) out.grad_mix.axpy_(config.theta, out.grad_val);
      break;
  }
  if (!all_finite(out.grad_mix)) throw TrainingDivergedError("hypergradient is not finite", step);
  return out;
}

OuterResult outer_step(const Batch& train_batch, const Batch& val_batch, State& state, const TrainConfig& config,
                       std::uint64_t noise_seed, std::size_t step) {
  OuterResult out = hypergradients(train_batch, val_batch, state, config, noise_seed, step);
  Tensor g = out.grad_mix;
  std::vector<Tensor*> ptrs{&g};
  clip_global(ptrs, config.grad_clip);
  state.lambda.raw().axpy_(-config.lr_lambda, g);
  return out;
}

Metrics evaluate(const State& state, const data::ImageDataset& source, std::span<const std::size_t> indices,
                 const TrainConfig& config) {
  if (indices.empty()) throw ContractError("evaluate: no records");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  Rng unused(0);
  for (std::size_t start = 0; start < indices.size(); start += config.eval_batch) {
    const std::size_t n = std::min(config.eval_batch, indices.size() - start);
    Batch b = source.gather(indices.subspan(start, n));
    ad::Tape tape;
    nn::ModelVars vars = nn::bind(tape, state.model, state.lambda, {false, false});
    ad::Var logits = nn::forward(state.model, vars, state.lambda, tape.constant(b.x), {false, config.temperature}, unused);
    loss_sum += nn::classification_loss(logits, b.y, config.loss).value().item() * static_cast<double>(n);
    const Tensor& z = logits.value();
    const std::size_t k = z.dim(1);
    for (std::size_t a = 0; a < n; ++a) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (z[a * k + c] > z[a * k + best]) best = c;
      }
      if (static_cast<int>(best) == b.y[a]) ++correct;
    }
  }
  const double total = static_cast<double>(indices.size());
  return {loss_sum / total, static_cast<double>(correct) / total};
}

Metrics FinalEvaluation::test_metrics(const State& state, const TrainConfig& config) const {
  const data::ImageDataset& test = corpus_.test(data::TestSetKey{});
  std::vector<std::size_t> all(test.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate(state, test, all, config);
}

std::size_t full_run_steps(const TrainConfig& config, std::size_t train_records) {
  const std::size_t per_epoch = (train_records + config.batch_size - 1) / config.batch_size;
  const std::size_t full = config.epochs * per_epoch;
  return config.max_inner_steps > 0 ? std::min(full, config.max_inner_steps) : full;
}

namespace {

Evaluation snapshot_eval(const State& state, const data::ImageDataset& source, const data::Split& split,
                         const TrainConfig& config, const FinalEvaluation* final_eval) {
  Evaluation e;
  const Metrics m = evaluate(state, source, split.val, config);
  e.val_loss = m.loss;
  e.val_accuracy = m.accuracy;
  if (final_eval != nullptr) e.test_accuracy = final_eval->test_metrics(state, config).accuracy;
  e.lambda = state.lambda.constrained();
  e.gap = cp::response_gap(state.model, state.lambda.raw()).value;
  return e;
}

data::Split split_for(const data::Corpus& corpus, const TrainConfig& config) {
  return data::split_train_val(corpus.train_source().size(), config.val_fraction, config.split_seed);
}

}  // namespace

RunResult train_cpmlho(const nn::ModelSpec& spec, const TrainConfig& config, const data::ImageDataset& source,
                       const data::Split& split, const FinalEvaluation* final_eval, TrainObserver* observer) {
  validate(config, spec);
  if (split.train.empty() || split.val.empty()) throw ContractError("train_cpmlho: empty split part");
  if (source.rows != spec.image_side || source.cols != spec.image_side) {
    throw DimensionError("images are " + std::to_string(source.rows) + "x" + std::to_string(source.cols) +
                         ", the model expects side " + std::to_string(spec.image_side));
  }
  const SeedPlan seeds{config.seed};
  RunResult run{{}, init_state(spec, config)};
  State& st = run.state;
  RunLog& log = run.log;
  log.lambda_names = st.lambda.names();
  log.initial = snapshot_eval(st, source, split, config, nullptr);

  data::BatchStream outer_train(split.train, config.batch_size, seeds.outer_train_stream());
  data::BatchStream outer_val(split.val, config.batch_size, seeds.outer_val_stream());
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t budget = full_run_steps(config, split.train.size());
  const std::size_t refresh = config.penalty.refresh_steps;
  std::size_t step = 0, outer = 0;
  std::optional<cp::Cut> cut;
  try {
    for (std::size_t epoch = 0; epoch < config.epochs && step < budget; ++epoch) {
      if (refresh == 0 || !cut) cut.emplace(cp::build_cut(st.model, st.lambda.raw(), config.penalty.eps));
      for (const auto& idx : data::epoch_batches(split.train, config.batch_size, seeds.epoch_order(epoch))) {
        if (step >= budget) break;
        if (refresh > 0 && step > 0 && step % refresh == 0) {
          cut.emplace(cp::build_cut(st.model, st.lambda.raw(), config.penalty.eps));
        }
        inner_step(source.gather(idx), st, &*cut, config, seeds.inner_noise(step), step);
        ++step;
        if (config.fixed_lambda || step % config.inner_steps_per_outer != 0) continue;

        const Batch tb = source.gather(outer_train.next());
        const Batch vb = source.gather(outer_val.next());
        const OuterResult r = outer_step(tb, vb, st, config, seeds.outer_noise(outer), step);
        ++outer;
        ScheduleRow row;
        row.step = outer;
        row.epoch = epoch;
        row.train_loss = r.train_loss;
        row.val_loss = r.val_loss;
        row.lambda = st.lambda.constrained();
        row.gap = cp::response_gap(st.model, st.lambda.raw()).value;
        row.phi = cut->evaluate(st.model, config.penalty.live_lambda ? &st.lambda.raw() : nullptr);
        row.walltime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.rows.push_back(row);
        if (observer != nullptr) observer->on_row(row);
      }
    }
  } catch (TrainingDivergedError& e) {
    log.inner_steps = step;
    e.attach_log(std::make_shared<const RunLog>(log));
    throw;
  }
  log.inner_steps = step;
  log.final = snapshot_eval(st, source, split, config, final_eval);
  return run;
}

RunResult train_cpmlho(const nn::ModelSpec& spec, const TrainConfig& config, const data::Corpus& corpus,
                       TrainObserver* observer) {
  const FinalEvaluation final_eval(corpus);
  return train_cpmlho(spec, config, corpus.train_source(), split_for(corpus, config), &final_eval, observer);
}

RunResult random_search(const nn::ModelSpec& spec, const TrainConfig& config, const data::ImageDataset& source,
                        const data::Split& split, std::size_t trials, const FinalEvaluation* final_eval) {
  if (trials == 0) throw ContractError("random search needs at least one trial");
  validate(config, spec);
  const std::size_t per_epoch = (split.train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = full_run_steps(config, split.train.size());
  const std::size_t per_trial = std::max<std::size_t>(1, total / trials);
  const auto specs = spec.hyper_specs(config.holes_max, config.length_max);
  Rng sampler(derive_seed(config.seed, kTrials));

  std::optional<RunResult> best;
  std::vector<TrialRecord> records;
  for (std::size_t t = 0; t < trials; ++t) {
    TrainConfig c = config;
    c.init_lambda.clear();
    for (const auto& s : specs) c.init_lambda.push_back(s.upper * sampler.uniform_open());
    c.hypernet = false;
    c.disable_cuts = true;
    c.fixed_lambda = true;
    c.max_inner_steps = per_trial;
    c.epochs = (per_trial + per_epoch - 1) / per_epoch;
    c.seed = derive_seed(config.seed, kTrials, t + 1);
    RunResult r = train_cpmlho(spec, c, source, split, nullptr);
    records.push_back({t, r.log.final.lambda, r.log.final.val_loss, r.log.final.val_accuracy});
    if (!best || r.log.final.val_loss < best->log.final.val_loss) {
      best = std::move(r);
      best->log.best_trial = t;
    }
  }
  if (final_eval != nullptr) {
    TrainConfig c = config;
    best->log.final.test_accuracy = final_eval->test_metrics(best->state, c).accuracy;
  }
  best->log.trials = std::move(records);
  return std::move(*best);
}

RunResult random_search(const nn::ModelSpec& spec, const TrainConfig& config, const data::Corpus& corpus,
                        std::size_t trials) {
  const FinalEvaluation final_eval(corpus);
  return random_search(spec, config, corpus.train_source(), split_for(corpus, config), trials, &final_eval);
}

}  // namespace cpmlho::train
