#include "cpmlho/cutting_plane.hpp"

#include <cmath>
#include <string>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"

namespace cpmlho::cp {

namespace {

void check_lambda(const nn::HyperLayerParams& layer, const Tensor& lambda_raw) {
  if (lambda_raw.rank() != 1 || lambda_raw.numel() != layer.w_h1.dim(1)) {
    throw DimensionError("response gap: lambda " + shape_to_string(lambda_raw.shape()) + " does not fit w_h1 " +
                         shape_to_string(layer.w_h1.shape()));
  }
}

std::vector<double> gates(const nn::HyperLayerParams& layer, std::span<const double> lambda) {
  const std::size_t rows = layer.w_h1.dim(0), n = layer.w_h1.dim(1);
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += layer.w_h1[r * n + j] * lambda[j];
  }
  return out;
}

void check_compatible(const nn::HyperLayerParams& snap, const Tensor& w_e, const Tensor& w_h1, const Tensor& w_h2) {
  if (!snap.w_e.same_shape(w_e) || !snap.w_h1.same_shape(w_h1) || !snap.w_h2.same_shape(w_h2)) {
    throw DimensionError("cut: parameters " + shape_to_string(w_e.shape()) + "/" + shape_to_string(w_h1.shape()) +
                         "/" + shape_to_string(w_h2.shape()) + " do not match the snapshot " +
                         shape_to_string(snap.w_e.shape()) + "/" + shape_to_string(snap.w_h1.shape()) + "/" +
                         shape_to_string(snap.w_h2.shape()));
  }
}

double inner(const Tensor& s, const Tensor& p, const Tensor& p0) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.numel(); ++i) acc += s[i] * (p[i] - p0[i]);
  return acc;
}

}  // namespace

ResponseGap response_gap(const std::vector<nn::HyperLayerParams>& layers, const Tensor& lambda_raw) {
  if (layers.empty()) throw ContractError("response gap needs at least one hyper layer");
  ResponseGap out;
  for (const auto& layer : layers) {
    nn::validate_layer(layer, lambda_raw.numel());
    check_lambda(layer, lambda_raw);
    const std::size_t rows = layer.out_rows(), cols = layer.row_size(), n = layer.w_h1.dim(1);
    const std::vector<double> gate = gates(layer, lambda_raw.data());
    LayerSubgradient s{Tensor::zeros_like(layer.w_e), Tensor::zeros_like(layer.w_h1), Tensor::zeros_like(layer.w_h2)};
    for (std::size_t r = 0; r < rows; ++r) {
      double row_pull = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const double diff = layer.w_e[i] - gate[r] * layer.w_h2[i];
        out.value += std::abs(diff);
        const double sg = subgradient_sign(diff);
        s.w_e[i] = sg;
        s.w_h2[i] = -sg * gate[r];
        row_pull += sg * layer.w_h2[i];
      }
      for (std::size_t j = 0; j < n; ++j) s.w_h1[r * n + j] = -row_pull * lambda_raw[j];
    }
    out.subgradients.push_back(std::move(s));
  }
  return out;
}

Cut build_cut(const std::vector<nn::HyperLayerParams>& layers, const Tensor& lambda_raw, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ContractError("cut: eps must be positive and finite");
  ResponseGap gap = response_gap(layers, lambda_raw);
  if (!std::isfinite(gap.value)) throw TrainingDivergedError("cut: response gap is not finite", 0);
  Cut cut;
  cut.snapshot_ = layers;
  cut.lambda_raw_ = lambda_raw;
  cut.subgradients_ = std::move(gap.subgradients);
  cut.gap_ = gap.value;
  cut.eps_ = eps;
  return cut;
}

std::vector<LayerSubgradient> Cut::hyper_slopes(const Tensor* live_lambda) const {
  if (live_lambda == nullptr) return subgradients_;
  std::vector<LayerSubgradient> out = subgradients_;
  for (std::size_t l = 0; l < snapshot_.size(); ++l) {
    const auto& layer = snapshot_[l];
    check_lambda(layer, *live_lambda);
    const std::size_t rows = layer.out_rows(), cols = layer.row_size(), n = layer.w_h1.dim(1);
    const std::vector<double> gate = gates(layer, live_lambda->data());
    for (std::size_t r = 0; r < rows; ++r) {
      double row_pull = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const double sg = subgradients_[l].w_e[i];
        out[l].w_h2[i] = -sg * gate[r];
        row_pull += sg * layer.w_h2[i];
      }
      for (std::size_t j = 0; j < n; ++j) out[l].w_h1[r * n + j] = -row_pull * (*live_lambda)[j];
    }
  }
  return out;
}

double Cut::evaluate(const std::vector<nn::HyperLayerParams>& layers, const Tensor* live_lambda) const {
  if (layers.size() != snapshot_.size()) throw DimensionError("cut: layer count differs from the snapshot");
  const std::vector<LayerSubgradient> slopes = hyper_slopes(live_lambda);
  double moved = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const auto& p0 = snapshot_[l];
    check_compatible(p0, p.w_e, p.w_h1, p.w_h2);
    moved += inner(slopes[l].w_e, p.w_e, p0.w_e) + inner(slopes[l].w_h1, p.w_h1, p0.w_h1) +
             inner(slopes[l].w_h2, p.w_h2, p0.w_h2);
  }
  // At the snapshot every difference is exactly zero, so phi == g_k - eps^2.
  return (gap_ + moved) - eps_ * eps_;
}

ad::Var Cut::evaluate(const std::vector<nn::HyperLayerVars>& layers, const Tensor* live_lambda) const {
  if (layers.size() != snapshot_.size()) throw DimensionError("cut: layer count differs from the snapshot");
  std::vector<nn::HyperLayerParams> current = snapshot_;
  std::vector<ad::Var> inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    current[l].w_e = layers[l].w_e.value();
    current[l].w_h1 = layers[l].w_h1.value();
    current[l].w_h2 = layers[l].w_h2.value();
    inputs.insert(inputs.end(), {layers[l].w_e, layers[l].w_h1, layers[l].w_h2});
  }
  const double phi = evaluate(current, live_lambda);
  auto slopes = std::make_shared<const std::vector<LayerSubgradient>>(hyper_slopes(live_lambda));
  ad::Tape& tape = *layers.front().w_e.tape();
  return tape.record("cut", inputs, Tensor::scalar(phi),
                     [slopes](const Tensor& up, std::span<Tensor* const> grads) {
                       const double u = up.item();
                       for (std::size_t l = 0; l < slopes->size(); ++l) {
                         const auto& s = (*slopes)[l];
                         if (grads[3 * l]) grads[3 * l]->axpy_(u, s.w_e);
                         if (grads[3 * l + 1]) grads[3 * l + 1]->axpy_(u, s.w_h1);
                         if (grads[3 * l + 2]) grads[3 * l + 2]->axpy_(u, s.w_h2);
                       }
                     });
}

void validate(const PenaltyConfig& penalty) {
  if (!std::isfinite(penalty.mu) || penalty.mu < 0.0) throw ConfigError("penalty: mu must be finite and >= 0");
  if (!std::isfinite(penalty.eps) || penalty.eps <= 0.0) throw ConfigError("penalty: eps must be finite and > 0");
}

ad::Var penalized_inner_loss(const nn::Model& model, const nn::ModelVars& vars, const nn::HyperParamVector& lambda,
                             const Batch& batch, const Cut& cut, const PenaltyConfig& penalty, nn::LossKind loss,
                             const nn::ForwardOptions& options, Rng& rng) {
  validate(penalty);
  ad::Var l = nn::inner_loss(model, vars, lambda, batch, loss, options, rng);
  if (penalty.mu == 0.0) return l;
  const Tensor* live = penalty.live_lambda ? &lambda.raw() : nullptr;
  return l + penalty.mu * cut.evaluate(vars.layers, live);
}

}  // namespace cpmlho::cp
