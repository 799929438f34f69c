#include "cpmlho/hyper_layer.hpp"

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"

namespace cpmlho::nn {

void validate_layer(const HyperLayerParams& layer, std::size_t n_lambda) {
  const std::size_t rank = layer.kind == LayerKind::Linear ? 2 : 4;
  if (layer.w_e.rank() != rank) {
    throw DimensionError("w_e has shape " + shape_to_string(layer.w_e.shape()) + ", expected rank " +
                         std::to_string(rank));
  }
  if (layer.w_h2.shape() != layer.w_e.shape()) {
    throw DimensionError("w_h2 " + shape_to_string(layer.w_h2.shape()) + " must match w_e " +
                         shape_to_string(layer.w_e.shape()));
  }
  if (layer.bias.numel() != layer.out_rows()) {
    throw DimensionError("bias " + shape_to_string(layer.bias.shape()) + " does not match " +
                         std::to_string(layer.out_rows()) + " outputs");
  }
  if (layer.w_h1.rank() != 2 || layer.w_h1.dim(0) != layer.out_rows() || layer.w_h1.dim(1) != n_lambda) {
    throw DimensionError("w_h1 " + shape_to_string(layer.w_h1.shape()) + " should be [" +
                         std::to_string(layer.out_rows()) + "x" + std::to_string(n_lambda) + "]");
  }
}

Tensor hyper_contribution(const HyperLayerParams& layer, std::span<const double> lambda_raw) {
  validate_layer(layer, lambda_raw.size());
  const std::size_t rows = layer.out_rows(), cols = layer.row_size(), n = lambda_raw.size();
  Tensor h(layer.w_h2.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double gate = 0.0;
    for (std::size_t j = 0; j < n; ++j) gate += layer.w_h1.at(r, j) * lambda_raw[j];
    for (std::size_t c = 0; c < cols; ++c) h[r * cols + c] = gate * layer.w_h2[r * cols + c];
  }
  return h;
}

ad::Var effective_weight(const HyperLayerVars& vars, ad::Var lambda_raw) {
  const std::size_t n = lambda_raw.value().numel();
  if (vars.w_h1.value().rank() != 2 || vars.w_h1.value().dim(1) != n) {
    throw DimensionError("lambda has " + std::to_string(n) + " entries but w_h1 is " +
                         shape_to_string(vars.w_h1.shape()));
  }
  ad::Var gate = ad::matmul(vars.w_h1, ad::reshape(lambda_raw, {n, 1}));
  return ad::add(vars.w_e, ad::scale_rows(vars.w_h2, gate));
}

ad::Var hyper_forward(const HyperLayerParams& layer, const HyperLayerVars& vars, ad::Var x, ad::Var lambda_raw) {
  ad::Var w = effective_weight(vars, lambda_raw);
  if (layer.kind == LayerKind::Linear) {
    return ad::add_bias(ad::matmul(x, ad::transpose(w)), vars.bias);
  }
  return ad::add_bias(ad::conv2d(x, w, layer.stride, layer.pad), vars.bias);
}

ad::Var hyper_forward(const HyperLayerParams& layer, ad::Var x, ad::Var lambda_raw) {
  ad::Tape& t = *x.tape();
  HyperLayerVars vars{t.constant(layer.w_e, "w_e"), t.constant(layer.bias, "bias"), t.constant(layer.w_h1, "w_h1"),
                      t.constant(layer.w_h2, "w_h2")};
  return hyper_forward(layer, vars, x, lambda_raw);
}

}  // namespace cpmlho::nn
