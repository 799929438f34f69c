#include <gtest/gtest.h>

#include <cmath>

#include "cpmlho/errors.hpp"
#include "cpmlho/model.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/regularizers.hpp"
#include "test_support.hpp"

using namespace cpmlho;
using namespace cpmlho::nn;
using cpmlho::testing::central_difference;
using cpmlho::testing::random_tensor;
using cpmlho::testing::rel_err;

namespace {

HyperLayerParams random_linear(std::size_t out, std::size_t in, std::size_t n, Rng& rng) {
  HyperLayerParams p;
  p.kind = LayerKind::Linear;
  p.w_e = random_tensor({out, in}, rng);
  p.bias = random_tensor({out}, rng);
  p.w_h1 = random_tensor({out, n}, rng);
  p.w_h2 = random_tensor({out, in}, rng);
  return p;
}

/// x W^T + b with plain loops.
Tensor dense_reference(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({n, out});
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x.at(a, i) * w.at(o, i);
      y.at(a, o) = s;
    }
  }
  return y;
}

ModelSpec tiny_mlp() {
  ModelSpec s = ModelSpec::mlp({5, 4});
  s.image_side = 3;
  s.classes = 3;
  return s;
}

ModelSpec tiny_cnn() {
  ModelSpec s = ModelSpec::cnn(2, 3);
  s.image_side = 8;
  s.classes = 3;
  return s;
}

Batch random_batch(const ModelSpec& spec, std::size_t n, Rng& rng) {
  Batch b{random_tensor({n, spec.channels, spec.image_side, spec.image_side}, rng, 0.0, 1.0), {}};
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(static_cast<int>(rng.below(spec.classes)));
  return b;
}

}  // namespace

TEST(HyperForward, ZeroGateMapIsThePlainLayer) {
  Rng rng(1);
  HyperLayerParams p = random_linear(4, 3, 2, rng);
  p.w_h1.fill(0.0);
  Tensor x = random_tensor({5, 3}, rng);
  ad::Tape tape;
  ad::Var y = hyper_forward(p, tape.constant(x), tape.constant(Tensor({2}, {0.7, -1.1})));
  EXPECT_LE(cpmlho::testing::max_abs_diff(y.value(), dense_reference(x, p.w_e, p.bias)), 1e-14);
}

TEST(HyperForward, UnitGateAddsHyperWeights) {
  Rng rng(2);
  HyperLayerParams p = random_linear(3, 4, 1, rng);
  p.w_h1.fill(1.0);
  Tensor x = random_tensor({2, 4}, rng);
  Tensor w = p.w_e;
  w.add_(p.w_h2);
  ad::Tape tape;
  ad::Var y = hyper_forward(p, tape.constant(x), tape.constant(Tensor({1}, {1.0})));
  EXPECT_LE(cpmlho::testing::max_abs_diff(y.value(), dense_reference(x, w, p.bias)), 1e-14);
}

TEST(HyperForward, LambdaGradientMatchesFiniteDifferencesAndIsConstant) {
  Rng rng(3);
  HyperLayerParams p = random_linear(4, 3, 2, rng);
  Tensor x = random_tensor({5, 3}, rng);
  Tensor weights = random_tensor({5, 4}, rng, 0.5, 1.5);
  auto value = [&](const std::vector<Tensor>& pt) {
    ad::Tape tape;
    ad::Var y = hyper_forward(p, tape.constant(x), tape.constant(pt[0]));
    return ad::sum(ad::mul(y, tape.constant(weights))).value().item();
  };
  auto grad = [&](const Tensor& lambda) {
    ad::Tape tape;
    ad::Var lam = tape.leaf(lambda);
    ad::Var y = hyper_forward(p, tape.constant(x), lam);
    return ad::backward(tape, ad::sum(ad::mul(y, tape.constant(weights))))[lam];
  };
  const Tensor l1({2}, {0.4, -0.9}), l2({2}, {-2.0, 1.3});
  EXPECT_LE(rel_err(grad(l1), central_difference(value, {l1}, 0)), 1e-6);
  EXPECT_EQ(grad(l1), grad(l2));
}

TEST(HyperForward, LambdaLengthMismatchIsADimensionError) {
  Rng rng(4);
  HyperLayerParams p = random_linear(4, 3, 2, rng);
  ad::Tape tape;
  EXPECT_THROW(hyper_forward(p, tape.constant(Tensor({1, 3})), tape.constant(Tensor({3}))), DimensionError);
}

TEST(HyperForward, EffectiveWeightIsAffineInLambda) {
  Rng rng(5);
  HyperLayerParams p = random_linear(3, 4, 3, rng);
  auto weight = [&](const Tensor& lambda) {
    ad::Tape tape;
    HyperLayerVars v{tape.constant(p.w_e), tape.constant(p.bias), tape.constant(p.w_h1), tape.constant(p.w_h2)};
    return effective_weight(v, tape.constant(lambda)).value();
  };
  const Tensor base({3}, {0.2, -0.5, 1.0});
  for (std::size_t j = 0; j < 3; ++j) {
    auto slope = [&](double h) {
      Tensor moved = base;
      moved[j] += h;
      Tensor d = weight(moved);
      d.axpy_(-1.0, weight(base));
      for (double& v : d.data()) v /= h;
      return d;
    };
    EXPECT_LE(cpmlho::testing::max_abs_diff(slope(1e-1), slope(1.0)), 1e-12);
  }
}

TEST(HyperForward, ConvLayerGatesPerOutputChannel) {
  Rng rng(6);
  HyperLayerParams p;
  p.kind = LayerKind::Conv;
  p.pad = 1;
  p.w_e = random_tensor({2, 1, 3, 3}, rng);
  p.w_h2 = random_tensor({2, 1, 3, 3}, rng);
  p.bias = Tensor({2});
  p.w_h1 = Tensor::from_rows({{2.0}, {0.0}});
  ad::Tape tape;
  Tensor x = random_tensor({1, 1, 5, 5}, rng);
  ad::Var y = hyper_forward(p, tape.constant(x), tape.constant(Tensor({1}, {0.5})));
  // channel 0 uses w_e + w_h2, channel 1 uses w_e alone
  Tensor k = p.w_e;
  for (std::size_t i = 0; i < 9; ++i) k[i] += p.w_h2[i];
  ad::Var ref = ad::conv2d(tape.constant(x), tape.constant(k), 1, 1);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(y.value()[i], ref.value()[i], 1e-14);
  for (std::size_t i = 25; i < 50; ++i) EXPECT_NEAR(y.value()[i], ref.value()[i], 1e-14);
}

TEST(RelaxedDropout, VanishingRateKeepsInput) {
  Rng rng(7);
  Tensor x = random_tensor({8, 16}, rng, 0.5, 1.5);
  ad::Tape tape;
  const HyperSpec spec{HyperKind::DropoutRate, "dropout0", 1.0};
  ad::Var rate = constrained_entry(tape.constant(Tensor({1}, {-8.0})), spec, 0);
  Rng noise(8);
  ad::Var y = relaxed_dropout(tape.constant(x), rate, 0.5, noise);
  Tensor diff = y.value();
  diff.axpy_(-1.0, x);
  EXPECT_LE(l2_norm(diff) / l2_norm(x), 1e-2);
}

TEST(RelaxedDropout, MonteCarloMeanMaskAtHalfRate) {
  constexpr std::size_t kSamples = 100000;
  ad::Tape tape;
  Rng noise(2024);
  ad::Var y = relaxed_dropout(tape.constant(Tensor({kSamples}, 1.0)), tape.constant(Tensor::scalar(0.5)), 0.5, noise);
  double mean_mask = 0.0;
  for (double v : y.value().data()) mean_mask += v * 0.5;  // y = m / (1 - rate)
  mean_mask /= kSamples;
  EXPECT_GE(mean_mask, 0.48);
  EXPECT_LE(mean_mask, 0.52);
}

TEST(RelaxedDropout, RateGradientMatchesFiniteDifferencesWithFrozenNoise) {
  Rng rng(9);
  Tensor x = random_tensor({4, 6}, rng);
  auto build = [&](ad::Tape& tape, ad::Var rate) {
    Rng noise(77);
    return ad::mean(relaxed_dropout(tape.constant(x), rate, 0.5, noise));
  };
  auto value = [&](const std::vector<Tensor>& pt) {
    ad::Tape tape;
    return build(tape, tape.constant(pt[0])).value().item();
  };
  for (double p : {0.1, 0.35, 0.8}) {
    ad::Tape tape;
    ad::Var rate = tape.leaf(Tensor::scalar(p));
    Tensor g = ad::backward(tape, build(tape, rate))[rate];
    EXPECT_LE(rel_err(g, central_difference(value, {Tensor::scalar(p)}, 0)), 1e-5) << p;
  }
}

TEST(RelaxedDropout, FrozenNoiseIsDeterministic) {
  Rng rng(10);
  Tensor x = random_tensor({3, 5}, rng);
  auto run = [&] {
    ad::Tape tape;
    Rng noise(5);
    return relaxed_dropout(tape.constant(x), tape.constant(Tensor::scalar(0.3)), 0.5, noise).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(RelaxedDropout, RateOutsideUnitIntervalIsRejected) {
  ad::Tape tape;
  Rng noise(1);
  ad::Var x = tape.constant(Tensor({2}, 1.0));
  EXPECT_THROW(relaxed_dropout(x, tape.constant(Tensor::scalar(0.0)), 0.5, noise), ContractError);
  EXPECT_THROW(relaxed_dropout(x, tape.constant(Tensor::scalar(1.0)), 0.5, noise), ContractError);
  EXPECT_THROW(relaxed_dropout(x, tape.constant(Tensor::scalar(0.5)), 0.0, noise), ContractError);
}

namespace {

// Independent soft-box oracle: smoothstep edges of one pixel, box of width L.
double oracle_step(double t) {
  if (t <= -0.5) return 0.0;
  if (t >= 0.5) return 1.0;
  const double s = t + 0.5;
  return 3 * s * s - 2 * s * s * s;
}
double oracle_box(double d, double l) { return oracle_step(l / 2 - d) - oracle_step(-l / 2 - d); }

struct CutoutRun {
  Tensor out;
  Tensor centers;
};

CutoutRun run_cutout(const Tensor& img, double holes, double length, std::uint64_t seed) {
  ad::Tape tape;
  Rng rng(seed);
  ad::Var y = soft_cutout(tape.constant(img), tape.constant(Tensor::scalar(holes)), tape.constant(Tensor::scalar(length)), rng);
  const auto& node = tape.node(y.id());
  Tensor centers = node.inputs.size() == 4 ? tape.node(node.inputs[3]).value : Tensor();
  return {y.value(), centers};
}

}  // namespace

TEST(SoftCutout, ZeroHolesIsExactIdentity) {
  Rng rng(11);
  Tensor img = random_tensor({1, 28, 28}, rng, 0, 1);
  EXPECT_EQ(run_cutout(img, 0.0, 6.0, 1).out, img);
}

TEST(SoftCutout, ZeroLengthIsIdentity) {
  Rng rng(12);
  Tensor img = random_tensor({2, 1, 28, 28}, rng, 0, 1);
  EXPECT_LE(cpmlho::testing::max_abs_diff(run_cutout(img, 2.5, 0.0, 3).out, img), 1e-6);
}

TEST(SoftCutout, OneHoleOfLengthFourOccludesAboutSixteenPixels) {
  const Tensor ones({1, 28, 28}, 1.0);
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    CutoutRun r = run_cutout(ones, 1.0, 4.0, seed);
    double mass = 0.0;
    for (double v : r.out.data()) mass += 1.0 - v;
    // brute-force mask summation from the recorded center
    const double cy = r.centers[0], cx = r.centers[1];
    double oracle = 0.0;
    for (int i = 0; i < 28; ++i) {
      for (int j = 0; j < 28; ++j) oracle += oracle_box(i - cy, 4.0) * oracle_box(j - cx, 4.0);
    }
    EXPECT_NEAR(mass, oracle, 1e-12) << seed;
    EXPECT_GE(mass, 12.0) << seed;
    EXPECT_LE(mass, 25.0) << seed;
  }
}

TEST(SoftCutout, PixelsOutsideEveryHoleAreUntouched) {
  Rng rng(13);
  Tensor img = random_tensor({3, 1, 28, 28}, rng, 0, 1);
  const double length = 5.3;
  CutoutRun r = run_cutout(img, 2.4, length, 17);
  const std::size_t holes = 3;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < 28; ++i) {
      for (std::size_t j = 0; j < 28; ++j) {
        bool inside = false;
        for (std::size_t k = 0; k < holes; ++k) {
          const double cy = r.centers[(a * holes + k) * 2], cx = r.centers[(a * holes + k) * 2 + 1];
          inside = inside || (std::abs(i - cy) < length / 2 + 0.5 && std::abs(j - cx) < length / 2 + 0.5);
        }
        const std::size_t idx = a * 784 + i * 28 + j;
        if (!inside) EXPECT_EQ(r.out[idx], img[idx]);
      }
    }
  }
}

TEST(SoftCutout, GradientsMatchFiniteDifferencesWithFrozenCenters) {
  Rng rng(14);
  Tensor img = random_tensor({2, 2, 10, 10}, rng, 0, 1);
  Tensor weights = random_tensor({2, 2, 10, 10}, rng, 0.5, 1.5);
  auto build = [&](ad::Tape& tape, ad::Var x, ad::Var holes, ad::Var length) {
    Rng centers(31);
    return ad::sum(ad::mul(soft_cutout(x, holes, length, centers), tape.constant(weights)));
  };
  auto value = [&](const std::vector<Tensor>& pt) {
    ad::Tape tape;
    return build(tape, tape.constant(pt[0]), tape.constant(pt[1]), tape.constant(pt[2])).value().item();
  };
  const std::vector<Tensor> pt{img, Tensor::scalar(1.6), Tensor::scalar(4.3)};
  ad::Tape tape;
  ad::Var x = tape.leaf(pt[0]), holes = tape.leaf(pt[1]), length = tape.leaf(pt[2]);
  ad::Gradients g = ad::backward(tape, build(tape, x, holes, length));
  EXPECT_LE(rel_err(g[x], central_difference(value, pt, 0)), 1e-6);
  EXPECT_LE(rel_err(g[holes], central_difference(value, pt, 1)), 1e-6);
  EXPECT_LE(rel_err(g[length], central_difference(value, pt, 2)), 1e-6);
  EXPECT_NE(g[holes][0], 0.0);
  EXPECT_NE(g[length][0], 0.0);
}

TEST(SoftCutout, FixedDrawCountKeepsTheStreamAlignedAcrossHoleCounts) {
  const Tensor img({3, 1, 12, 12}, 1.0);
  std::vector<std::uint64_t> after;
  for (double holes : {0.0, 0.3, 1.0, 2.7, 3.0}) {
    ad::Tape tape;
    Rng rng(5);
    soft_cutout(tape.constant(img), tape.constant(Tensor::scalar(holes)), tape.constant(Tensor::scalar(3.0)), rng, 3);
    after.push_back(rng.below(1u << 30));
  }
  for (std::uint64_t v : after) EXPECT_EQ(v, after.front());
  // the first centers agree whatever the count
  ad::Tape tape;
  Rng one(5), three(5);
  auto centers = [&](double holes, Rng& rng) {
    ad::Var y = soft_cutout(tape.constant(img), tape.constant(Tensor::scalar(holes)), tape.constant(Tensor::scalar(3.0)),
                            rng, 3);
    return tape.node(tape.node(y.id()).inputs[3]).value;
  };
  const Tensor c1 = centers(1.0, one), c3 = centers(3.0, three);
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_EQ(c1[a * 2], c3[a * 6]);
    EXPECT_EQ(c1[a * 2 + 1], c3[a * 6 + 1]);
  }
}

TEST(SoftCutout, HoleSlopeAtWholeCountsIsTheLeftDerivative) {
  const Tensor img({2, 1, 12, 12}, 1.0);
  auto value = [&](double holes) {
    ad::Tape tape;
    Rng rng(9);
    return ad::sum(soft_cutout(tape.constant(img), tape.constant(Tensor::scalar(holes)),
                               tape.constant(Tensor::scalar(3.5)), rng, 4))
        .value()
        .item();
  };
  for (double at : {1.0, 2.0}) {
    ad::Tape tape;
    Rng rng(9);
    ad::Var holes = tape.leaf(Tensor::scalar(at));
    ad::Var y = ad::sum(soft_cutout(tape.constant(img), holes, tape.constant(Tensor::scalar(3.5)), rng, 4));
    const double slope = ad::backward(tape, y)[holes][0];
    const double h = 1e-6;
    EXPECT_NEAR(slope, (value(at) - value(at - h)) / h, 1e-5) << at;
    EXPECT_LT(slope, 0.0);
  }
}

TEST(SoftCutout, NegativeArgumentsAreRejected) {
  ad::Tape tape;
  Rng rng(1);
  ad::Var x = tape.constant(Tensor({1, 4, 4}, 1.0));
  EXPECT_THROW(soft_cutout(x, tape.constant(Tensor::scalar(-0.1)), tape.constant(Tensor::scalar(2.0)), rng),
               ContractError);
  EXPECT_THROW(soft_cutout(x, tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(-2.0)), rng),
               ContractError);
}

TEST(HyperParams, TransformsRoundTripAndRespectBounds) {
  const HyperSpec holes{HyperKind::CutoutHoles, "cutout_holes", 4.0};
  for (double v : {0.01, 0.73, 2.0, 3.99}) {
    EXPECT_NEAR(HyperParamVector::to_constrained(holes, HyperParamVector::to_raw(holes, v)), v, 1e-12);
  }
  EXPECT_THROW(HyperParamVector::to_raw(holes, 4.0), ContractError);
  const HyperSpec rate{HyperKind::DropoutRate, "dropout0", 1.0};
  EXPECT_GT(HyperParamVector::to_constrained(rate, -40.0), 0.0);
  EXPECT_LT(HyperParamVector::to_constrained(rate, 30.0), 1.0);
}

TEST(ModelSpec, SitesCoverEveryLambdaEntryOnce) {
  EXPECT_EQ(ModelSpec::mlp().num_hyper(), 3u);
  EXPECT_EQ(ModelSpec::cnn().num_hyper(), 5u);
  EXPECT_NO_THROW(validate_spec(ModelSpec::mlp()));
  EXPECT_NO_THROW(validate_spec(ModelSpec::cnn()));
  ModelSpec bad = ModelSpec::mlp();
  bad.dropout_sites[1].lambda_index = 0;
  EXPECT_THROW(validate_spec(bad), ContractError);
}

TEST(InnerLoss, UniformPredictionGivesLogTen) {
  ad::Tape tape;
  std::vector<int> y{0, 4, 9};
  EXPECT_NEAR(classification_loss(tape.constant(Tensor({3, 10}, -1.5)), y, LossKind::CrossEntropy).value().item(),
              std::log(10.0), 1e-12);
}

TEST(InnerLoss, LabelOutOfRangeIsADataError) {
  ModelSpec spec = tiny_mlp();
  Rng rng(15);
  Model m = init_model(spec, rng);
  auto lambda = HyperParamVector::from_constrained(spec.hyper_specs(4, 8), {0.2, 0.2, 0.2});
  Batch b = random_batch(spec, 2, rng);
  b.y[1] = 3;
  ad::Tape tape;
  ModelVars v = bind(tape, m, lambda, {});
  EXPECT_THROW(inner_loss(m, v, lambda, b, LossKind::CrossEntropy, {}, rng), DataError);
}

namespace {

/// Flattens every parameter block and lambda into one list of leaves.
std::vector<Tensor> model_point(const Model& m, const HyperParamVector& lambda) {
  std::vector<Tensor> pt;
  for (const auto& l : m.layers) {
    pt.push_back(l.w_e);
    pt.push_back(l.bias);
    pt.push_back(l.w_h1);
    pt.push_back(l.w_h2);
  }
  pt.push_back(lambda.raw());
  return pt;
}

void unpack(const std::vector<Tensor>& pt, Model& m, HyperParamVector& lambda) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    m.layers[i].w_e = pt[4 * i];
    m.layers[i].bias = pt[4 * i + 1];
    m.layers[i].w_h1 = pt[4 * i + 2];
    m.layers[i].w_h2 = pt[4 * i + 3];
  }
  lambda.raw() = pt.back();
}

constexpr double kCompositeFloor = 1e-4;

void check_inner_loss_gradients(const ModelSpec& spec, LossKind kind, std::vector<double> lambda_values) {
  Rng rng(16);
  Model base = init_model(spec, rng, {0.3, true});
  // zero biases put ReLU kinks exactly on occluded pixels
  for (auto& l : base.layers) l.bias = random_tensor(l.bias.shape(), rng, 0.05, 0.2);
  auto lambda0 = HyperParamVector::from_constrained(spec.hyper_specs(4, 6), lambda_values);
  Batch batch = random_batch(spec, 3, rng);
  auto loss_at = [&](Model& m, HyperParamVector& lambda, ad::Tape& tape, ModelVars& vars) {
    Rng noise(123);
    return inner_loss(m, vars, lambda, batch, kind, {true, 0.5}, noise);
  };
  auto value = [&](const std::vector<Tensor>& pt) {
    Model m = base;
    HyperParamVector lambda = lambda0;
    unpack(pt, m, lambda);
    ad::Tape tape;
    ModelVars vars = bind(tape, m, lambda, {false, false});
    return loss_at(m, lambda, tape, vars).value().item();
  };
  Model m = base;
  HyperParamVector lambda = lambda0;
  ad::Tape tape;
  ModelVars vars = bind(tape, m, lambda, {true, true});
  ad::Gradients g = ad::backward(tape, loss_at(m, lambda, tape, vars));
  std::vector<ad::Var> leaves;
  for (const auto& l : vars.layers) {
    leaves.insert(leaves.end(), {l.w_e, l.bias, l.w_h1, l.w_h2});
  }
  leaves.push_back(vars.lambda_raw);
  const auto pt = model_point(base, lambda0);
  for (std::size_t i = 0; i < pt.size(); ++i) {
    EXPECT_LE(rel_err(g[leaves[i]], central_difference(value, pt, i), kCompositeFloor), 1e-5) << "leaf " << i;
  }
}

}  // namespace

TEST(InnerLoss, MlpGradientsMatchFiniteDifferences) {
  check_inner_loss_gradients(tiny_mlp(), LossKind::CrossEntropy, {0.2, 0.4, 0.1});
}

TEST(InnerLoss, MlpSquaredErrorGradientsMatchFiniteDifferences) {
  check_inner_loss_gradients(tiny_mlp(), LossKind::SquaredError, {0.3, 0.1, 0.5});
}

TEST(InnerLoss, CnnGradientsIncludingCutoutMatchFiniteDifferences) {
  check_inner_loss_gradients(tiny_cnn(), LossKind::CrossEntropy, {0.1, 0.2, 0.3, 1.6, 3.3});
}

TEST(Model, ZeroGatesCoincideWithAPlainNetwork) {
  ModelSpec spec = tiny_mlp();
  Rng rng(17);
  Model m = init_model(spec, rng, {0.0, false});
  auto lambda = HyperParamVector::from_constrained(spec.hyper_specs(4, 6), {0.3, 0.2, 0.1});
  Batch batch = random_batch(spec, 4, rng);

  ad::Tape tape;
  ModelVars vars = bind(tape, m, lambda, {true, false});
  Rng noise(5);
  ad::Var loss = inner_loss(m, vars, lambda, batch, LossKind::CrossEntropy, {false, 0.5}, noise);
  ad::Gradients g = ad::backward(tape, loss);

  ad::Tape plain;
  std::vector<ad::Var> w;
  ad::Var h = ad::reshape(plain.constant(batch.x), {4, 9});
  for (std::size_t i = 0; i < 3; ++i) {
    w.push_back(plain.leaf(m.layers[i].w_e));
    ad::Var b = plain.leaf(m.layers[i].bias);
    h = ad::add_bias(ad::matmul(h, ad::transpose(w.back())), b);
    if (i < 2) h = ad::relu(h);
  }
  ad::Var ref = ad::softmax_cross_entropy(h, batch.y);
  ad::Gradients gr = ad::backward(plain, ref);
  EXPECT_EQ(loss.value(), ref.value());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g[vars.layers[i].w_e], gr[w[i]]);
}

TEST(Model, EvalModeIsDeterministicAndNoiseFree) {
  ModelSpec spec = tiny_cnn();
  Rng rng(18);
  Model m = init_model(spec, rng);
  auto lambda = HyperParamVector::from_constrained(spec.hyper_specs(4, 6), {0.3, 0.2, 0.1, 1.0, 3.0});
  Batch batch = random_batch(spec, 2, rng);
  auto run = [&](std::uint64_t seed) {
    ad::Tape tape;
    ModelVars vars = bind(tape, m, lambda, {false, false});
    Rng noise(seed);
    return forward(m, vars, lambda, tape.constant(batch.x), {false, 0.5}, noise).value();
  };
  EXPECT_EQ(run(1), run(2));
}

TEST(RelaxedDropout, LogitFormMatchesRateForm) {
  Rng rng(19);
  Tensor x = random_tensor({4, 5}, rng);
  for (double raw : {-3.0, -0.4, 1.2}) {
    ad::Tape tape;
    ad::Var lam = tape.leaf(Tensor({1}, {raw}));
    Rng n1(8), n2(8);
    ad::Var a = relaxed_dropout(tape.constant(x), ad::sigmoid(ad::select(lam, 0)), 0.5, n1);
    ad::Var b = relaxed_dropout_logit(tape.constant(x), ad::select(lam, 0), 0.5, n2);
    EXPECT_LE(cpmlho::testing::max_abs_diff(a.value(), b.value()), 1e-13);
    Tensor ga = ad::backward(tape, ad::sum(a))[lam], gb = ad::backward(tape, ad::sum(b))[lam];
    EXPECT_LE(rel_err(ga, gb), 1e-12);
  }
}

TEST(RelaxedDropout, LogitFormStaysFiniteNearSaturation) {
  ad::Tape tape;
  Rng noise(3);
  ad::Var y = relaxed_dropout_logit(tape.constant(Tensor({3}, 1.0)), tape.constant(Tensor({1}, {40.0})), 0.5, noise);
  EXPECT_TRUE(y.value().all_finite());
}
