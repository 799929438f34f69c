#include "cpmlho/model.hpp"

#include <cmath>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/regularizers.hpp"

namespace cpmlho::nn {

std::string to_string(Architecture a) { return a == Architecture::Mlp ? "mlp" : "cnn"; }
std::string to_string(LossKind k) { return k == LossKind::CrossEntropy ? "cross_entropy" : "squared_error"; }

ModelSpec ModelSpec::mlp(std::vector<std::size_t> hidden) {
  ModelSpec s;
  s.arch = Architecture::Mlp;
  s.hidden = std::move(hidden);
  if (s.hidden.size() != 2) throw ContractError("the MLP has exactly two hidden layers");
  s.dropout_sites = {{0, 0}, {1, 1}, {2, 2}};
  return s;
}

ModelSpec ModelSpec::cnn(std::size_t conv1, std::size_t conv2) {
  ModelSpec s;
  s.arch = Architecture::Cnn;
  s.conv1 = conv1;
  s.conv2 = conv2;
  s.dropout_sites = {{0, 0}, {1, 1}, {2, 2}};
  s.cutout = CutoutSite{3, 4};
  return s;
}

std::vector<HyperSpec> ModelSpec::hyper_specs(double holes_max, double length_max) const {
  std::vector<HyperSpec> specs(num_hyper());
  for (const auto& site : dropout_sites) {
    specs.at(site.lambda_index) = {HyperKind::DropoutRate, "dropout" + std::to_string(site.layer), 1.0};
  }
  if (cutout) {
    specs.at(cutout->holes_index) = {HyperKind::CutoutHoles, "cutout_holes", holes_max};
    specs.at(cutout->length_index) = {HyperKind::CutoutLength, "cutout_length", length_max};
  }
  return specs;
}

void validate_spec(const ModelSpec& spec) {
  std::vector<int> uses(spec.num_hyper(), 0);
  auto use = [&](std::size_t i) {
    if (i >= uses.size()) throw ContractError("lambda index " + std::to_string(i) + " out of range");
    ++uses[i];
  };
  for (const auto& site : spec.dropout_sites) {
    if (site.layer >= spec.num_layers()) throw ContractError("dropout site on a missing layer");
    use(site.lambda_index);
  }
  if (spec.cutout) {
    if (spec.arch != Architecture::Cnn) throw ContractError("cutout is only defined for the CNN");
    use(spec.cutout->holes_index);
    use(spec.cutout->length_index);
  }
  for (std::size_t i = 0; i < uses.size(); ++i) {
    if (uses[i] != 1) {
      throw ContractError("lambda entry " + std::to_string(i) + " is referenced by " + std::to_string(uses[i]) +
                          " sites");
    }
  }
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

HyperLayerParams make_layer(LayerKind kind, Shape w_shape, std::size_t n_lambda, Rng& rng,
                            const InitOptions& options) {
  HyperLayerParams p;
  p.kind = kind;
  const std::size_t fan_in = shape_numel(w_shape) / w_shape[0];
  p.w_e = he_normal(w_shape, fan_in, rng);
  p.w_h2 = he_normal(w_shape, fan_in, rng);
  p.bias = Tensor({w_shape[0]});
  p.w_h1 = Tensor({w_shape[0], n_lambda});
  if (options.hypernet) {
    for (double& v : p.w_h1.data()) v = options.gate_std * rng.normal();
  }
  if (kind == LayerKind::Conv) p.pad = w_shape[2] / 2;
  return p;
}

}  // namespace

Model init_model(const ModelSpec& spec, Rng& rng, const InitOptions& options) {
  validate_spec(spec);
  const std::size_t n = spec.num_hyper();
  Model m{spec, {}};
  if (spec.arch == Architecture::Mlp) {
    const std::size_t in = spec.channels * spec.image_side * spec.image_side;
    m.layers.push_back(make_layer(LayerKind::Linear, {spec.hidden[0], in}, n, rng, options));
    m.layers.push_back(make_layer(LayerKind::Linear, {spec.hidden[1], spec.hidden[0]}, n, rng, options));
    m.layers.push_back(make_layer(LayerKind::Linear, {spec.classes, spec.hidden[1]}, n, rng, options));
  } else {
    const std::size_t k = spec.kernel;
    const std::size_t side = spec.image_side / 2 / 2;
    m.layers.push_back(make_layer(LayerKind::Conv, {spec.conv1, spec.channels, k, k}, n, rng, options));
    m.layers.push_back(make_layer(LayerKind::Conv, {spec.conv2, spec.conv1, k, k}, n, rng, options));
    m.layers.push_back(make_layer(LayerKind::Linear, {spec.classes, spec.conv2 * side * side}, n, rng, options));
  }
  for (const auto& l : m.layers) validate_layer(l, n);
  return m;
}

ModelVars bind(ad::Tape& tape, const Model& model, const HyperParamVector& lambda, Binding binding) {
  auto make = [&](const Tensor& t, const char* name, bool diff) {
    return diff ? tape.leaf(t, name) : tape.constant(t, name);
  };
  ModelVars vars;
  for (const auto& l : model.layers) {
    vars.layers.push_back({make(l.w_e, "w_e", binding.weights), make(l.bias, "bias", binding.weights),
                           make(l.w_h1, "w_h1", binding.weights), make(l.w_h2, "w_h2", binding.weights)});
  }
  vars.lambda_raw = make(lambda.raw(), "lambda_raw", binding.lambda);
  return vars;
}

namespace {

ad::Var dropout_for_layer(const Model& model, const ModelVars& vars, const HyperParamVector& lambda,
                          std::size_t layer, ad::Var h, const ForwardOptions& options, Rng& rng) {
  if (!options.train) return h;
  for (const auto& site : model.spec.dropout_sites) {
    if (site.layer != layer) continue;
    // dropout entries have upper bound 1, so the raw value is the rate logit
    h = relaxed_dropout_logit(h, ad::select(vars.lambda_raw, site.lambda_index), options.temperature, rng);
  }
  return h;
}

}  // namespace

ad::Var forward(const Model& model, const ModelVars& vars, const HyperParamVector& lambda, ad::Var images,
                const ForwardOptions& options, Rng& rng) {
  const ModelSpec& spec = model.spec;
  const Tensor& xv = images.value();
  if (xv.rank() != 4 || xv.dim(1) != spec.channels || xv.dim(2) != spec.image_side || xv.dim(3) != spec.image_side) {
    throw DimensionError("model expects images [N x " + std::to_string(spec.channels) + " x " +
                         std::to_string(spec.image_side) + " x " + std::to_string(spec.image_side) + "], got " +
                         shape_to_string(xv.shape()));
  }
  if (lambda.size() != spec.num_hyper()) {
    throw DimensionError("model has " + std::to_string(spec.num_hyper()) + " hyperparameters, lambda has " +
                         std::to_string(lambda.size()));
  }
  const std::size_t n = xv.dim(0);
  ad::Var h = images;

  if (spec.arch == Architecture::Mlp) {
    h = ad::reshape(h, {n, xv.numel() / n});
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      h = dropout_for_layer(model, vars, lambda, i, h, options, rng);
      h = hyper_forward(model.layers[i], vars.layers[i], h, vars.lambda_raw);
      if (i + 1 < model.layers.size()) h = ad::relu(h);
    }
    return h;
  }

  if (options.train && spec.cutout) {
    ad::Var holes = constrained_entry(vars.lambda_raw, lambda.spec(spec.cutout->holes_index), spec.cutout->holes_index);
    ad::Var length =
        constrained_entry(vars.lambda_raw, lambda.spec(spec.cutout->length_index), spec.cutout->length_index);
    const auto draws = static_cast<std::size_t>(std::ceil(lambda.spec(spec.cutout->holes_index).upper));
    h = soft_cutout(h, holes, length, rng, draws);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    h = dropout_for_layer(model, vars, lambda, i, h, options, rng);
    h = ad::max_pool2d(ad::relu(hyper_forward(model.layers[i], vars.layers[i], h, vars.lambda_raw)), 2);
  }
  h = ad::reshape(h, {n, h.value().numel() / n});
  h = dropout_for_layer(model, vars, lambda, 2, h, options, rng);
  return hyper_forward(model.layers[2], vars.layers[2], h, vars.lambda_raw);
}

ad::Var classification_loss(ad::Var logits, const std::vector<int>& labels, LossKind loss) {
  return loss == LossKind::CrossEntropy ? ad::softmax_cross_entropy(logits, labels) : ad::squared_error(logits, labels);
}

ad::Var inner_loss(const Model& model, const ModelVars& vars, const HyperParamVector& lambda, const Batch& batch,
                   LossKind loss, const ForwardOptions& options, Rng& rng) {
  if (batch.size() == 0) throw ContractError("inner_loss on an empty batch");
  ad::Tape& tape = *vars.lambda_raw.tape();
  ad::Var x = tape.constant(batch.x, "images");
  return classification_loss(forward(model, vars, lambda, x, options, rng), batch.y, loss);
}

}  // namespace cpmlho::nn
