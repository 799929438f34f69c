#pragma once

#include <cstddef>
#include <vector>

#include "cpmlho/model.hpp"
#include "cpmlho/tape.hpp"
#include "cpmlho/tensor.hpp"

namespace cpmlho::cp {

/// Subgradients of the gap for one hyper layer.
struct LayerSubgradient {
  Tensor w_e;
  Tensor w_h1;
  Tensor w_h2;
};

/// Entrywise L1 distance between the direct weights and the hyper contribution,
/// summed over every hyper layer (biases are not part of it).
struct ResponseGap {
  double value = 0.0;
  std::vector<LayerSubgradient> subgradients;
};

/// sign(t) with sign(0) = 0.
inline double subgradient_sign(double t) { return t > 0.0 ? 1.0 : (t < 0.0 ? -1.0 : 0.0); }

ResponseGap response_gap(const std::vector<nn::HyperLayerParams>& layers, const Tensor& lambda_raw);
inline ResponseGap response_gap(const nn::Model& model, const Tensor& lambda_raw) {
  return response_gap(model.layers, lambda_raw);
}

/// Linearization of the gap at a frozen snapshot:
///   phi(p) = g_k + <s_k, p - p_k> - eps^2
/// Immutable once built, so it may be read from several threads.
class Cut {
 public:
  const std::vector<nn::HyperLayerParams>& snapshot() const noexcept { return snapshot_; }
  const Tensor& lambda_raw() const noexcept { return lambda_raw_; }
  const std::vector<LayerSubgradient>& subgradients() const noexcept { return subgradients_; }
  double gap() const noexcept { return gap_; }
  double eps() const noexcept { return eps_; }

  /// phi at the given parameters. With live_lambda set, the w_h subgradients are
  /// re-expressed at that lambda instead of the snapshot one.
  double evaluate(const std::vector<nn::HyperLayerParams>& layers, const Tensor* live_lambda = nullptr) const;
  double evaluate(const nn::Model& model, const Tensor* live_lambda = nullptr) const {
    return evaluate(model.layers, live_lambda);
  }

  /// phi as a tape node over every layer's w_e, w_h1 and w_h2 handles.
  ad::Var evaluate(const std::vector<nn::HyperLayerVars>& layers, const Tensor* live_lambda = nullptr) const;

 private:
  friend Cut build_cut(const std::vector<nn::HyperLayerParams>&, const Tensor&, double);
  Cut() = default;

  std::vector<LayerSubgradient> hyper_slopes(const Tensor* live_lambda) const;

  std::vector<nn::HyperLayerParams> snapshot_;
  Tensor lambda_raw_;
  std::vector<LayerSubgradient> subgradients_;
  double gap_ = 0.0;
  double eps_ = 0.0;
};

/// Throws ContractError for eps <= 0 and TrainingDivergedError for a non-finite gap.
Cut build_cut(const std::vector<nn::HyperLayerParams>& layers, const Tensor& lambda_raw, double eps);
inline Cut build_cut(const nn::Model& model, const Tensor& lambda_raw, double eps) {
  return build_cut(model.layers, lambda_raw, eps);
}

struct PenaltyConfig {
  double mu = 0.1;
  double eps = 1e-3;
  /// Inner steps between cut rebuilds; 0 means once per epoch.
  std::size_t refresh_steps = 1;
  /// Evaluate the cut with the current lambda rather than the snapshot one.
  bool live_lambda = false;
};

/// Throws ConfigError for negative or non-finite mu, or eps that is not positive.
void validate(const PenaltyConfig& penalty);

/// inner_loss + mu * phi.
ad::Var penalized_inner_loss(const nn::Model& model, const nn::ModelVars& vars, const nn::HyperParamVector& lambda,
                             const Batch& batch, const Cut& cut, const PenaltyConfig& penalty, nn::LossKind loss,
                             const nn::ForwardOptions& options, Rng& rng);

}  // namespace cpmlho::cp
