#include "cpmlho/gradcheck_suite.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "cpmlho/cutting_plane.hpp"
#include "cpmlho/data.hpp"
#include "cpmlho/errors.hpp"
#include "cpmlho/hyper_layer.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/regularizers.hpp"
#include "cpmlho/train.hpp"

namespace cpmlho::check {

namespace {

using ad::Tape;
using ad::Var;
using Leaves = std::span<const Var>;

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts a tensor output against fixed random weights so every entry
// contributes a distinct slope.
Var probe(Var x, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(x, x.tape()->constant(uniform(x.shape(), rng, 0.5, 1.5))));
}

struct Builder {
  Rng rng;
  std::vector<OpCase> cases;

  void add(std::string name, std::vector<std::pair<Shape, std::pair<double, double>>> shapes, ad::GraphBuilder fn) {
    OpCase c{std::move(name), {}, std::move(fn)};
    char label = 'a';
    for (auto& [shape, range] : shapes) c.point.push_back({std::string(1, label++), uniform(shape, rng, range.first, range.second)});
    cases.push_back(std::move(c));
  }
};

constexpr std::pair<double, double> kSym{-1.0, 1.0};

std::vector<nn::HyperLayerParams> two_layers(Rng& rng) {
  nn::HyperLayerParams a{nn::LayerKind::Linear, uniform({3, 4}, rng), uniform({3}, rng), uniform({3, 2}, rng),
                         uniform({3, 4}, rng)};
  nn::HyperLayerParams b{nn::LayerKind::Linear, uniform({2, 3}, rng), uniform({2}, rng), uniform({2, 2}, rng),
                         uniform({2, 3}, rng)};
  return {a, b};
}

}  // namespace

std::vector<OpCase> registered_ops(std::uint64_t seed) {
  Builder b{Rng(seed), {}};
  const std::uint64_t w = seed ^ 0x5eedULL;

  b.add("add", {{{2, 3}, kSym}, {{2, 3}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::add(l[0], l[1]), w); });
  b.add("add_broadcast", {{{2, 3}, kSym}, {{1}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::add(l[0], l[1]), w); });
  b.add("sub", {{{4}, kSym}, {{4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::sub(l[0], l[1]), w); });
  b.add("mul", {{{3, 2}, kSym}, {{3, 2}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::mul(l[0], l[1]), w); });
  b.add("div", {{{5}, kSym}, {{5}, {0.5, 2.0}}}, [w](Tape&, Leaves l) { return probe(ad::div(l[0], l[1]), w); });
  b.add("neg", {{{4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::neg(l[0]), w); });
  b.add("scale", {{{4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::scale(l[0], -2.5), w); });
  b.add("add_scalar", {{{4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::add_scalar(l[0], 3.0), w); });
  b.add("exp", {{{6}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::exp(l[0]), w); });
  b.add("log", {{{6}, {0.2, 3.0}}}, [w](Tape&, Leaves l) { return probe(ad::log(l[0]), w); });
  b.add("sigmoid", {{{6}, {-4.0, 4.0}}}, [w](Tape&, Leaves l) { return probe(ad::sigmoid(l[0]), w); });
  b.add("relu", {{{8}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::relu(l[0]), w); });
  b.add("square", {{{5}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::square(l[0]), w); });
  b.add("sum", {{{3, 3}, kSym}}, [](Tape&, Leaves l) { return ad::square(ad::sum(l[0])); });
  b.add("mean", {{{3, 3}, kSym}}, [](Tape&, Leaves l) { return ad::square(ad::mean(l[0])); });
  b.add("select", {{{5}, kSym}}, [](Tape&, Leaves l) { return ad::mul(ad::select(l[0], 2), ad::select(l[0], 4)); });
  b.add("reshape", {{{12}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::reshape(l[0], {3, 4}), w); });
  b.add("transpose", {{{3, 4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::transpose(l[0]), w); });
  b.add("matmul", {{{5, 4}, kSym}, {{4, 3}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::matmul(l[0], l[1]), w); });
  b.add("scale_rows", {{{3, 2, 2}, kSym}, {{3, 1}, kSym}},
        [w](Tape&, Leaves l) { return probe(ad::scale_rows(l[0], l[1]), w); });
  b.add("add_bias", {{{2, 3, 2, 2}, kSym}, {{3}, kSym}},
        [w](Tape&, Leaves l) { return probe(ad::add_bias(l[0], l[1]), w); });
  b.add("conv2d", {{{2, 2, 5, 5}, kSym}, {{3, 2, 3, 3}, kSym}},
        [w](Tape&, Leaves l) { return probe(ad::conv2d(l[0], l[1], 1, 1), w); });
  b.add("conv2d_strided", {{{1, 2, 6, 6}, kSym}, {{2, 2, 3, 3}, kSym}},
        [w](Tape&, Leaves l) { return probe(ad::conv2d(l[0], l[1], 2, 1), w); });
  b.add("max_pool2d", {{{2, 2, 4, 4}, kSym}}, [w](Tape&, Leaves l) { return probe(ad::max_pool2d(l[0], 2), w); });
  b.add("softmax_cross_entropy", {{{3, 4}, {-3.0, 3.0}}}, [](Tape&, Leaves l) {
    static const std::vector<int> y{0, 3, 1};
    return ad::softmax_cross_entropy(l[0], y);
  });
  b.add("squared_error", {{{2, 3}, kSym}}, [](Tape&, Leaves l) {
    static const std::vector<int> y{2, 0};
    return ad::squared_error(l[0], y);
  });

  // composite layers
  b.add("hyper_linear", {{{2, 4}, kSym}, {{3, 4}, kSym}, {{3}, kSym}, {{3, 2}, kSym}, {{3, 4}, kSym}, {{2}, kSym}},
        [w](Tape&, Leaves l) {
          nn::HyperLayerParams layer{nn::LayerKind::Linear, l[1].value(), l[2].value(), l[3].value(), l[4].value()};
          return probe(nn::hyper_forward(layer, {l[1], l[2], l[3], l[4]}, l[0], l[5]), w);
        });
  b.add("hyper_conv", {{{1, 2, 4, 4}, kSym}, {{2, 2, 3, 3}, kSym}, {{2}, kSym}, {{2, 2}, kSym}, {{2, 2, 3, 3}, kSym},
                       {{2}, kSym}},
        [w](Tape&, Leaves l) {
          nn::HyperLayerParams layer{nn::LayerKind::Conv, l[1].value(), l[2].value(), l[3].value(), l[4].value(), 1, 1};
          return probe(nn::hyper_forward(layer, {l[1], l[2], l[3], l[4]}, l[0], l[5]), w);
        });
  b.add("relaxed_dropout", {{{3, 4}, kSym}, {{1}, {0.2, 0.7}}}, [w, seed](Tape&, Leaves l) {
    Rng noise(seed + 1);
    return probe(nn::relaxed_dropout(l[0], l[1], 0.5, noise), w);
  });
  b.add("relaxed_dropout_logit", {{{3, 4}, kSym}, {{1}, kSym}}, [w, seed](Tape&, Leaves l) {
    Rng noise(seed + 2);
    return probe(nn::relaxed_dropout_logit(l[0], l[1], 0.5, noise), w);
  });
  b.add("soft_cutout", {{{2, 1, 8, 8}, {0.0, 1.0}}, {{1}, {1.2, 1.8}}, {{1}, {2.6, 3.4}}}, [w, seed](Tape&, Leaves l) {
    Rng centers(seed + 3);
    return probe(nn::soft_cutout(l[0], l[1], l[2], centers, 2), w);
  });

  Rng cut_rng(seed + 4);
  const auto snapshot = two_layers(cut_rng);
  const Tensor cut_lambda = uniform({2}, cut_rng);
  auto cut = std::make_shared<cp::Cut>(cp::build_cut(snapshot, cut_lambda, 1e-3));
  OpCase phi{"cut", {}, [cut](Tape&, Leaves l) {
               std::vector<nn::HyperLayerVars> vars;
               for (std::size_t k = 0; k < 2; ++k) {
                 Var bias = l[0].tape()->constant(cut->snapshot()[k].bias);
                 vars.push_back({l[3 * k], bias, l[3 * k + 1], l[3 * k + 2]});
               }
               return cut->evaluate(vars);
             }};
  Rng moved(seed + 5);
  auto nudged = [&moved](Tensor t) {
    for (double& v : t.data()) v += moved.uniform(-0.1, 0.1);
    return t;
  };
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& layer = snapshot[k];
    const std::string tag = std::to_string(k);
    phi.point.push_back({"w_e" + tag, nudged(layer.w_e)});
    phi.point.push_back({"w_h1" + tag, nudged(layer.w_h1)});
    phi.point.push_back({"w_h2" + tag, nudged(layer.w_h2)});
  }
  b.cases.push_back(std::move(phi));
  return b.cases;
}

CheckLine check_op(const OpCase& op, double tolerance) {
  CheckLine line{op.name, "op", 0.0, false};
  try {
    const ad::GradientReport report = ad::grad_check(op.build, op.point);
    line.max_rel_error = report.all_finite() ? report.max_rel_error() : std::numeric_limits<double>::infinity();
  } catch (const Error&) {
    line.max_rel_error = std::numeric_limits<double>::infinity();
  }
  line.passed = line.max_rel_error <= tolerance;
  return line;
}

CheckLine check_hypergradient(const std::string& name, const nn::ModelSpec& spec, std::uint64_t seed,
                              double tolerance) {
  train::TrainConfig config;
  config.seed = seed;
  config.theta = 0.7;
  config.gate_std = 0.3;
  config.length_max = static_cast<double>(spec.image_side) / 2.0;
  if (spec.cutout) config.init_lambda = {0.2, 0.3, 0.25, 1.4, 2.3};
  else config.init_lambda = {0.2, 0.3, 0.25};

  const data::ImageDataset source = data::make_synthetic(12, spec.image_side, seed);
  const std::vector<std::size_t> train_rows{0, 1, 2, 3, 4, 5}, val_rows{6, 7, 8, 9, 10, 11};
  const Batch train_batch = source.gather(train_rows);
  const Batch val_batch = source.gather(val_rows);
  train::State state = train::init_state(spec, config);
  // nonzero biases keep ReLU inputs away from exact zeros on occluded pixels
  Rng bias_rng(seed + 7);
  for (auto& layer : state.model.layers) {
    for (double& v : layer.bias.data()) v = bias_rng.uniform(-0.1, 0.1);
  }

  const std::uint64_t noise = train::SeedPlan{seed}.outer_noise(0);
  const train::OuterResult at = train::hypergradients(train_batch, val_batch, state, config, noise);
  auto objective = [&](const train::State& s) {
    const train::OuterResult r = train::hypergradients(train_batch, val_batch, s, config, noise);
    return r.train_loss + config.theta * r.val_loss;
  };
  const double h = 1e-5;
  Tensor numeric = Tensor::zeros_like(at.grad_mix);
  train::State probe_state = state;
  for (std::size_t i = 0; i < numeric.numel(); ++i) {
    const double x0 = state.lambda.raw()[i];
    probe_state.lambda.raw()[i] = x0 + h;
    const double fp = objective(probe_state);
    probe_state.lambda.raw()[i] = x0 - h;
    const double fm = objective(probe_state);
    probe_state.lambda.raw()[i] = x0;
    numeric[i] = (fp - fm) / (2.0 * h);
  }
  CheckLine line{name, "hypergradient", ad::max_relative_error(at.grad_mix, numeric), false};
  if (!at.grad_mix.all_finite()) line.max_rel_error = std::numeric_limits<double>::infinity();
  line.passed = line.max_rel_error <= tolerance;
  return line;
}

bool SuiteReport::passed() const {
  for (const auto& l : lines) {
    if (!l.passed) return false;
  }
  return !lines.empty();
}

std::vector<std::string> SuiteReport::failures() const {
  std::vector<std::string> out;
  for (const auto& l : lines) {
    if (!l.passed) out.push_back(l.name);
  }
  return out;
}

csv::Table SuiteReport::table() const {
  csv::Table t{{"check", "kind", "max_rel_error", "status"}, {}};
  for (const auto& l : lines) {
    // non-finite gradients are reported as inf
    const std::string err = std::isfinite(l.max_rel_error) ? csv::format_number(l.max_rel_error) : "inf";
    t.rows.push_back({l.name, l.kind, err, l.passed ? "pass" : "FAIL"});
  }
  return t;
}

SuiteReport run_suite(std::uint64_t seed, const std::vector<OpCase>& extra, double tolerance) {
  SuiteReport report;
  for (const auto& op : registered_ops(seed)) report.lines.push_back(check_op(op, tolerance));
  for (const auto& op : extra) report.lines.push_back(check_op(op, tolerance));

  nn::ModelSpec mlp = nn::ModelSpec::mlp({5, 4});
  mlp.image_side = 6;
  report.lines.push_back(check_hypergradient("hypergradient_mlp", mlp, seed, tolerance));
  nn::ModelSpec cnn = nn::ModelSpec::cnn(2, 3);
  cnn.image_side = 8;
  report.lines.push_back(check_hypergradient("hypergradient_cnn", cnn, seed, tolerance));
  return report;
}

}  // namespace cpmlho::check
