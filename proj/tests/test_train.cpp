#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/regularizers.hpp"
#include "cpmlho/train.hpp"
#include "reference_sgd.hpp"
#include "test_support.hpp"

using namespace cpmlho;
using namespace cpmlho::train;
using cpmlho::testing::central_difference;
using cpmlho::testing::max_abs_diff;
using cpmlho::testing::rel_err;

namespace {

nn::ModelSpec small_mlp() {
  nn::ModelSpec s = nn::ModelSpec::mlp({16, 12});
  s.image_side = 8;
  return s;
}

nn::ModelSpec small_cnn() {
  nn::ModelSpec s = nn::ModelSpec::cnn(3, 4);
  s.image_side = 8;
  return s;
}

struct SmallData {
  data::ImageDataset source = data::make_synthetic(360, 8, 11);
  data::Split split = data::split_train_val(360, 1.0 / 6, 3);
};

const SmallData& small_data() {
  static const SmallData d;
  return d;
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 32;
  c.lr_we = c.lr_wh = 0.05;
  c.lr_lambda = 0.02;
  c.seed = 5;
  c.eval_batch = 64;
  c.length_max = 6.0;
  return c;
}

Batch first_batch(std::size_t n, std::size_t offset = 0) {
  const auto& d = small_data();
  std::vector<std::size_t> idx(d.split.train.begin() + static_cast<std::ptrdiff_t>(offset),
                               d.split.train.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return d.source.gather(idx);
}

Batch first_val_batch(std::size_t n) {
  const auto& d = small_data();
  std::vector<std::size_t> idx(d.split.val.begin(), d.split.val.begin() + static_cast<std::ptrdiff_t>(n));
  return d.source.gather(idx);
}

bool same_params(const nn::Model& a, const nn::Model& b) {
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto &x = a.layers[i], &y = b.layers[i];
    if (!(x.w_e == y.w_e && x.bias == y.bias && x.w_h1 == y.w_h1 && x.w_h2 == y.w_h2)) return false;
  }
  return true;
}

double cosine(const Tensor& a, const Tensor& b) { return dot(a, b) / (l2_norm(a) * l2_norm(b)); }

}  // namespace

TEST(InnerStep, ZeroRatesLeaveEverythingUnchanged) {
  TrainConfig c = small_config();
  c.lr_we = c.lr_wh = 0.0;
  State s = init_state(small_mlp(), c);
  const State before = s;
  cp::Cut cut = cp::build_cut(s.model, s.lambda.raw(), 1e-3);
  inner_step(first_batch(8), s, &cut, c, 1);
  EXPECT_TRUE(same_params(s.model, before.model));
  EXPECT_EQ(s.lambda.raw(), before.lambda.raw());
}

TEST(InnerStep, DisabledCutsGiveThePlainGradientStep) {
  TrainConfig c = small_config();
  State a = init_state(small_mlp(), c), b = a;
  auto moved = a.model;
  for (auto& l : moved.layers) l.w_h2.axpy_(0.2, Tensor(l.w_h2.shape(), 1.0));
  a.model = b.model = moved;
  cp::Cut cut = cp::build_cut(init_state(small_mlp(), c).model, a.lambda.raw(), 1e-3);
  TrainConfig off = c;
  off.disable_cuts = true;
  inner_step(first_batch(8), a, &cut, off, 2);
  inner_step(first_batch(8), b, nullptr, c, 2);
  EXPECT_TRUE(same_params(a.model, b.model));
}

TEST(InnerStep, PenaltyMovesOnlyHyperWeights) {
  TrainConfig c = small_config();
  State a = init_state(small_mlp(), c), b = a;
  cp::Cut cut = cp::build_cut(a.model, a.lambda.raw(), 1e-3);
  c.penalty.mu = 0.5;
  inner_step(first_batch(8), a, &cut, c, 3);
  inner_step(first_batch(8), b, nullptr, c, 3);
  for (std::size_t i = 0; i < a.model.layers.size(); ++i) {
    EXPECT_EQ(a.model.layers[i].w_e, b.model.layers[i].w_e);
    EXPECT_EQ(a.model.layers[i].bias, b.model.layers[i].bias);
    EXPECT_NE(a.model.layers[i].w_h2, b.model.layers[i].w_h2);
  }
}

namespace {

// Scalar replay of one inner step on a 1-1-1-2 network with a single sample.
struct ToyParams {
  double we[3][2], b[3][2], wh1[3][2][3], wh2[3][2];
};

ToyParams toy_from(const nn::Model& m) {
  ToyParams p{};
  for (int l = 0; l < 3; ++l) {
    const auto& L = m.layers[static_cast<std::size_t>(l)];
    for (std::size_t r = 0; r < L.w_e.dim(0); ++r) {
      p.we[l][r] = L.w_e[r];
      p.b[l][r] = L.bias[r];
      p.wh2[l][r] = L.w_h2[r];
      for (std::size_t j = 0; j < 3; ++j) p.wh1[l][r][j] = L.w_h1[r * 3 + j];
    }
  }
  return p;
}

ToyParams toy_sgd(ToyParams p, const double lam[3], double x, int y, std::uint64_t seed, double lr_e, double lr_h,
                  double mu) {
  const int rows[3] = {1, 1, 2};
  double gate[3][2], W[3][2], d[3], s[3][2];
  Rng rng(seed);
  for (int i = 0; i < 3; ++i) {
    const double u = rng.uniform_open();
    const double z = std::log(u) - std::log1p(-u);
    const double rate = 1.0 / (1.0 + std::exp(-lam[i]));
    const double m = 1.0 / (1.0 + std::exp(-(z + std::log(1 - rate) - std::log(rate)) / 0.5));
    d[i] = m / (1 - rate);
  }
  for (int l = 0; l < 3; ++l) {
    for (int r = 0; r < rows[l]; ++r) {
      gate[l][r] = p.wh1[l][r][0] * lam[0] + p.wh1[l][r][1] * lam[1] + p.wh1[l][r][2] * lam[2];
      W[l][r] = p.we[l][r] + gate[l][r] * p.wh2[l][r];
      const double diff = p.we[l][r] - gate[l][r] * p.wh2[l][r];
      s[l][r] = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    }
  }
  const double h0 = x * d[0], a0 = W[0][0] * h0 + p.b[0][0], r0 = std::max(a0, 0.0);
  const double h1 = r0 * d[1], a1 = W[1][0] * h1 + p.b[1][0], r1 = std::max(a1, 0.0);
  const double h2 = r1 * d[2];
  const double o[2] = {W[2][0] * h2 + p.b[2][0], W[2][1] * h2 + p.b[2][1]};
  const double mx = std::max(o[0], o[1]);
  const double z0 = std::exp(o[0] - mx), z1 = std::exp(o[1] - mx);
  const double delta[2] = {z0 / (z0 + z1) - (y == 0), z1 / (z0 + z1) - (y == 1)};
  double dW[3][2], db[3][2];
  for (int c = 0; c < 2; ++c) {
    dW[2][c] = delta[c] * h2;
    db[2][c] = delta[c];
  }
  const double da1 = (delta[0] * W[2][0] + delta[1] * W[2][1]) * d[2] * (a1 > 0 ? 1.0 : 0.0);
  dW[1][0] = da1 * h1;
  db[1][0] = da1;
  const double da0 = da1 * W[1][0] * d[1] * (a0 > 0 ? 1.0 : 0.0);
  dW[0][0] = da0 * h0;
  db[0][0] = da0;
  ToyParams q = p;
  for (int l = 0; l < 3; ++l) {
    for (int r = 0; r < rows[l]; ++r) {
      q.we[l][r] -= lr_e * dW[l][r];
      q.b[l][r] -= lr_e * db[l][r];
      q.wh2[l][r] -= lr_h * (dW[l][r] * gate[l][r] - mu * s[l][r] * gate[l][r]);
      for (int j = 0; j < 3; ++j) {
        q.wh1[l][r][j] -= lr_h * (dW[l][r] * p.wh2[l][r] * lam[j] - mu * s[l][r] * p.wh2[l][r] * lam[j]);
      }
    }
  }
  return q;
}

}  // namespace

TEST(InnerStep, MatchesHandRolledScalarSgd) {
  nn::ModelSpec spec = nn::ModelSpec::mlp({1, 1});
  spec.image_side = 1;
  spec.classes = 2;
  TrainConfig c;
  c.lr_we = 0.1;
  c.lr_wh = 0.07;
  c.penalty.mu = 0.3;
  c.init_lambda = {0.3, 0.4, 0.2};
  c.gate_std = 0.5;
  State s = init_state(spec, c);
  for (auto& l : s.model.layers) {
    for (double& v : l.w_e.data()) v = std::abs(v) + 0.2;
    for (double& v : l.bias.data()) v = 0.1;
  }
  const ToyParams before = toy_from(s.model);
  const double lam[3] = {s.lambda.raw()[0], s.lambda.raw()[1], s.lambda.raw()[2]};
  cp::Cut cut = cp::build_cut(s.model, s.lambda.raw(), 1e-3);
  Batch b{Tensor({1, 1, 1, 1}, {0.8}), {1}};
  inner_step(b, s, &cut, c, 99);
  const ToyParams want = toy_sgd(before, lam, 0.8, 1, 99, 0.1, 0.07, 0.3);
  const ToyParams got = toy_from(s.model);
  const int rows[3] = {1, 1, 2};
  for (int l = 0; l < 3; ++l) {
    for (int r = 0; r < rows[l]; ++r) {
      EXPECT_NEAR(got.we[l][r], want.we[l][r], 1e-12) << l;
      EXPECT_NEAR(got.b[l][r], want.b[l][r], 1e-12) << l;
      EXPECT_NEAR(got.wh2[l][r], want.wh2[l][r], 1e-12) << l;
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(got.wh1[l][r][j], want.wh1[l][r][j], 1e-12) << l;
    }
  }
  EXPECT_NE(got.we[0][0], before.we[0][0]);
}

TEST(InnerStep, NonFiniteLossReportsTheStep) {
  TrainConfig c = small_config();
  State s = init_state(small_mlp(), c);
  s.model.layers[2].bias[0] = std::nan("");
  try {
    inner_step(first_batch(4), s, nullptr, c, 1, 17);
    FAIL() << "no divergence reported";
  } catch (const TrainingDivergedError& e) {
    EXPECT_EQ(e.step(), 17u);
  }
}

TEST(OuterStep, ThetaZeroIsTheTrainOnlyGradientBitwise) {
  TrainConfig c = small_config();
  c.theta = 0.0;
  State s = init_state(small_mlp(), c);
  OuterResult r = hypergradients(first_batch(16), first_val_batch(16), s, c, 4);
  EXPECT_EQ(r.grad_mix, r.grad_train);
  TrainConfig single = small_config();
  single.theta_mode = ThetaMode::SingleLevel;
  EXPECT_EQ(hypergradients(first_batch(16), first_val_batch(16), s, single, 4).grad_mix, r.grad_train);
  const Tensor before = s.lambda.raw();
  outer_step(first_batch(16), first_val_batch(16), s, c, 4);
  Tensor expect = before;
  expect.axpy_(-c.lr_lambda, r.grad_train);
  EXPECT_EQ(s.lambda.raw(), expect);
}

TEST(OuterStep, MixedGradientIsLinearInTheta) {
  TrainConfig c = small_config();
  c.theta = 2.0;
  State s = init_state(small_cnn(), c);
  OuterResult r = hypergradients(first_batch(16), first_val_batch(16), s, c, 6);
  Tensor lhs = r.grad_mix;
  lhs.axpy_(-2.0, r.grad_val);
  EXPECT_LE(max_abs_diff(lhs, r.grad_train), 1e-15 * (1 + l2_norm(r.grad_mix)));
}

TEST(OuterStep, LargeThetaFollowsTheValidationDirection) {
  TrainConfig c = small_config();
  c.theta = 1e6;
  State s = init_state(small_mlp(), c);
  OuterResult r = hypergradients(first_batch(16), first_val_batch(16), s, c, 8);
  ASSERT_GT(l2_norm(r.grad_train), 1e-8);
  ASSERT_GT(l2_norm(r.grad_val), 1e-8);
  Tensor neg_val = r.grad_val;
  for (double& v : neg_val.data()) v = -v;
  Tensor update = r.grad_mix;
  for (double& v : update.data()) v = -v;
  EXPECT_GE(cosine(update, neg_val), 0.999);
  TrainConfig bilevel = c;
  bilevel.theta_mode = ThetaMode::Bilevel;
  EXPECT_EQ(hypergradients(first_batch(16), first_val_batch(16), s, bilevel, 8).grad_mix, r.grad_val);
}

TEST(OuterStep, HypergradientMatchesFiniteDifferences) {
  for (const nn::ModelSpec& spec : {small_mlp(), small_cnn()}) {
    TrainConfig c = small_config();
    c.theta = 0.7;
    c.gate_std = 0.3;
    // hole counts off whole numbers, where the occlusion mass has a kink
    if (spec.arch == nn::Architecture::Cnn) c.init_lambda = {0.2, 0.2, 0.2, 1.4, 3.3};
    State s = init_state(spec, c);
    const Batch tb = first_batch(6), vb = first_val_batch(6);
    auto mixed = [&](const std::vector<Tensor>& pt) {
      State moved = s;
      moved.lambda.raw() = pt[0];
      OuterResult r = hypergradients(tb, vb, moved, c, 21);
      return r.train_loss + c.theta * r.val_loss;
    };
    OuterResult r = hypergradients(tb, vb, s, c, 21);
    EXPECT_LE(rel_err(r.grad_mix, central_difference(mixed, {s.lambda.raw()}, 0), 1e-4), 1e-4)
        << nn::to_string(spec.arch);
  }
}

TEST(Ownership, InnerStepsNeverTouchLambdaAndOuterStepsNeverTouchWeights) {
  TrainConfig c = small_config();
  State s = init_state(small_cnn(), c);
  cp::Cut cut = cp::build_cut(s.model, s.lambda.raw(), 1e-3);
  const Tensor lambda_before = s.lambda.raw();
  inner_step(first_batch(8), s, &cut, c, 1);
  EXPECT_EQ(s.lambda.raw(), lambda_before);
  const nn::Model model_before = s.model;
  outer_step(first_batch(8), first_val_batch(8), s, c, 2);
  EXPECT_TRUE(same_params(s.model, model_before));
  EXPECT_NE(s.lambda.raw(), lambda_before);
}

TEST(TrainRun, IdenticalInputsReplayBitForBit) {
  const auto& d = small_data();
  RunResult a = train_cpmlho(small_mlp(), small_config(), d.source, d.split);
  RunResult b = train_cpmlho(small_mlp(), small_config(), d.source, d.split);
  EXPECT_TRUE(same_trajectory(a.log, b.log));
  EXPECT_TRUE(same_params(a.state.model, b.state.model));
  ASSERT_FALSE(a.log.rows.empty());
  for (std::size_t i = 1; i < a.log.rows.size(); ++i) EXPECT_GT(a.log.rows[i].step, a.log.rows[i - 1].step);
  TrainConfig other = small_config();
  other.seed = 6;
  EXPECT_FALSE(same_trajectory(a.log, train_cpmlho(small_mlp(), other, d.source, d.split).log));
}

TEST(TrainRun, LogsOneRowPerOuterStepWithConstrainedLambda) {
  const auto& d = small_data();
  TrainConfig c = small_config();
  RunResult r = train_cpmlho(small_cnn(), c, d.source, d.split);
  const std::size_t steps = 2 * ((d.split.train.size() + 31) / 32);
  EXPECT_EQ(r.log.inner_steps, steps);
  EXPECT_EQ(r.log.rows.size(), steps / 2);
  EXPECT_EQ(r.log.lambda_names.size(), 5u);
  for (const auto& row : r.log.rows) {
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_GT(row.lambda[i], 0.0);
      EXPECT_LT(row.lambda[i], 1.0);
    }
    EXPECT_GT(row.lambda[4], 0.0);
    EXPECT_LT(row.lambda[4], c.length_max);
    EXPECT_TRUE(std::isfinite(row.gap) && std::isfinite(row.phi));
  }
  EXPECT_TRUE(std::isnan(r.log.final.test_accuracy));
}

TEST(TrainRun, ZeroEpochsOnlyEvaluates) {
  const auto& d = small_data();
  TrainConfig c = small_config();
  c.epochs = 0;
  RunResult r = train_cpmlho(small_mlp(), c, d.source, d.split);
  EXPECT_TRUE(r.log.rows.empty());
  EXPECT_EQ(r.log.inner_steps, 0u);
  EXPECT_EQ(r.log.final.lambda, r.log.initial.lambda);
  EXPECT_EQ(r.log.final.val_loss, r.log.initial.val_loss);
}

TEST(TrainRun, LearnsTheSyntheticTask) {
  const data::ImageDataset source = data::make_synthetic(900, 12, 11);
  const data::Split split = data::split_train_val(900, 1.0 / 6, 3);
  nn::ModelSpec spec = nn::ModelSpec::mlp({32, 16});
  spec.image_side = 12;
  TrainConfig c = small_config();
  c.epochs = 8;
  RunResult r = train_cpmlho(spec, c, source, split);
  EXPECT_LT(r.log.final.val_loss, r.log.initial.val_loss);
  EXPECT_GT(r.log.final.val_accuracy, 0.3);
}

TEST(TrainRun, DivergenceCarriesThePartialLog) {
  const auto& d = small_data();
  TrainConfig c = small_config();
  c.lr_we = 1e300;
  try {
    train_cpmlho(small_mlp(), c, d.source, d.split);
    FAIL() << "no divergence reported";
  } catch (const TrainingDivergedError& e) {
    ASSERT_TRUE(e.partial_log());
    EXPECT_EQ(e.partial_log()->inner_steps, e.step());
    EXPECT_FALSE(std::isnan(e.partial_log()->initial.val_loss));
  }
}

TEST(TrainRun, ConfigValidation) {
  TrainConfig c = small_config();
  c.lr_lambda = 0.0;
  EXPECT_THROW(validate(c, small_mlp()), ConfigError);
  c = small_config();
  c.theta = -1.0;
  EXPECT_THROW(validate(c, small_mlp()), ConfigError);
  c = small_config();
  c.init_lambda = {0.1, 0.2};
  EXPECT_THROW(validate(c, small_mlp()), ConfigError);
  c.init_lambda = {0.1, 0.2, 1.0};
  EXPECT_THROW(validate(c, small_mlp()), ConfigError);
  c = small_config();
  c.length_max = 9.0;
  EXPECT_THROW(validate(c, small_cnn()), ConfigError);
  EXPECT_NO_THROW(validate(small_config(), small_cnn()));
}

namespace {

}  // namespace

TEST(Degeneracy, PlainLayersNoCutsThetaZeroIsPlainSgd) {
  const auto& d = small_data();
  const nn::ModelSpec spec = small_mlp();
  TrainConfig c = small_config();
  c.hypernet = false;
  c.disable_cuts = true;
  c.theta = 0.0;
  RunResult run = train_cpmlho(spec, c, d.source, d.split);
  const cpmlho::testing::ReferenceRun ref = cpmlho::testing::plain_sgd(spec, c, d.source, d.split);

  ASSERT_EQ(ref.train_losses.size(), run.log.rows.size());
  for (std::size_t k = 0; k < ref.train_losses.size(); ++k) {
    EXPECT_EQ(run.log.rows[k].train_loss, ref.train_losses[k]) << "outer step " << k;
    EXPECT_EQ(run.log.rows[k].lambda, ref.lambdas[k]) << "outer step " << k;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(run.state.model.layers[i].w_e, ref.w[i]);
    EXPECT_EQ(run.state.model.layers[i].bias, ref.b[i]);
  }
}

TEST(RandomSearch, BestTrialIsTheArgminAndLambdaStaysFixed) {
  const auto& d = small_data();
  TrainConfig c = small_config();
  RunResult r = random_search(small_mlp(), c, d.source, d.split, 4);
  ASSERT_EQ(r.log.trials.size(), 4u);
  double best = r.log.trials[0].val_loss;
  std::size_t arg = 0;
  for (const auto& t : r.log.trials) {
    if (t.val_loss < best) {
      best = t.val_loss;
      arg = t.trial;
    }
    for (double v : t.lambda) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
  EXPECT_EQ(r.log.best_trial, arg);
  EXPECT_EQ(r.log.final.val_loss, best);
  EXPECT_EQ(r.log.final.lambda, r.log.initial.lambda);
  EXPECT_TRUE(r.log.rows.empty());
  const std::size_t budget = full_run_steps(c, d.split.train.size());
  EXPECT_EQ(r.log.inner_steps, budget / 4);
}

TEST(RandomSearch, SingleTrialIsOneFixedLambdaRun) {
  const auto& d = small_data();
  TrainConfig c = small_config();
  RunResult r = random_search(small_cnn(), c, d.source, d.split, 1);
  ASSERT_EQ(r.log.trials.size(), 1u);
  TrainConfig fixed = c;
  fixed.init_lambda = r.log.trials[0].lambda;
  fixed.hypernet = false;
  fixed.disable_cuts = true;
  fixed.fixed_lambda = true;
  fixed.max_inner_steps = full_run_steps(c, d.split.train.size());
  EXPECT_EQ(r.log.inner_steps, fixed.max_inner_steps);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(r.log.final.lambda[i], fixed.init_lambda[i], 1e-12);
  }
}

TEST(CutEfficacy, PenaltyShrinksTheGapOverSeeds) {
  const auto& d = small_data();
  std::vector<double> with, without;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig c = small_config();
    c.epochs = 1;
    c.seed = seed;
    c.penalty.mu = 0.1;
    with.push_back(train_cpmlho(small_mlp(), c, d.source, d.split).log.final.gap);
    c.penalty.mu = 0.0;
    without.push_back(train_cpmlho(small_mlp(), c, d.source, d.split).log.final.gap);
  }
  std::sort(with.begin(), with.end());
  std::sort(without.begin(), without.end());
  EXPECT_LT(with[2], without[2]);
}
