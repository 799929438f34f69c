#pragma once

#include <cstddef>
#include <span>

#include "cpmlho/tape.hpp"
#include "cpmlho/tensor.hpp"

namespace cpmlho::nn {

enum class LayerKind { Linear, Conv };

/// Weights of one best-response layer:
///
///   W(lambda) = w_e + diag(w_h1 * lambda_raw) * w_h2
///
/// The diagonal gate scales output rows (linear) or output channels (conv).
/// w_e is [out x in] or [F x C x kh x kw]; w_h2 has the same shape; w_h1 is
/// [out x n]. The bias belongs to w_e and is not gated.
struct HyperLayerParams {
  LayerKind kind = LayerKind::Linear;
  Tensor w_e;
  Tensor bias;
  Tensor w_h1;
  Tensor w_h2;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_rows() const { return w_e.dim(0); }
  /// Entries per output row of w_e (in, or C*kh*kw).
  std::size_t row_size() const { return w_e.numel() / w_e.dim(0); }
};

/// The same parameters bound to tape nodes.
struct HyperLayerVars {
  ad::Var w_e, bias, w_h1, w_h2;
};

/// Throws DimensionError unless the four blocks fit together and w_h1 has
/// `n_lambda` columns.
void validate_layer(const HyperLayerParams& layer, std::size_t n_lambda);

/// Hyper contribution H(lambda) = diag(w_h1 * lambda_raw) * w_h2, value only.
Tensor hyper_contribution(const HyperLayerParams& layer, std::span<const double> lambda_raw);

/// Differentiable W(lambda).
ad::Var effective_weight(const HyperLayerVars& vars, ad::Var lambda_raw);

/// W(lambda) applied to x plus bias: x W^T + b for linear layers ([N x in]
/// input), zero-padded cross-correlation for conv layers ([N x C x H x W]).
ad::Var hyper_forward(const HyperLayerParams& layer, const HyperLayerVars& vars, ad::Var x, ad::Var lambda_raw);

/// Convenience: binds `layer` as constants on the input's tape.
ad::Var hyper_forward(const HyperLayerParams& layer, ad::Var x, ad::Var lambda_raw);

}  // namespace cpmlho::nn
