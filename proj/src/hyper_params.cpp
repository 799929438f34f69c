#include "cpmlho/hyper_params.hpp"

#include <cmath>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"

namespace cpmlho::nn {

HyperParamVector::HyperParamVector(std::vector<HyperSpec> specs, Tensor raw)
    : specs_(std::move(specs)), raw_(std::move(raw)) {
  if (raw_.numel() != specs_.size()) {
    throw DimensionError("hyperparameter vector has " + std::to_string(raw_.numel()) + " raw values for " +
                         std::to_string(specs_.size()) + " specs");
  }
  for (const auto& s : specs_) {
    if (!(s.upper > 0.0) || !std::isfinite(s.upper)) throw ContractError("hyperparameter upper bound must be positive");
  }
}

HyperParamVector HyperParamVector::from_constrained(std::vector<HyperSpec> specs, const std::vector<double>& values) {
  if (values.size() != specs.size()) {
    throw DimensionError("expected " + std::to_string(specs.size()) + " hyperparameter values, got " +
                         std::to_string(values.size()));
  }
  Tensor raw({specs.size()});
  for (std::size_t i = 0; i < specs.size(); ++i) raw[i] = to_raw(specs[i], values[i]);
  return HyperParamVector(std::move(specs), std::move(raw));
}

double HyperParamVector::to_constrained(const HyperSpec& spec, double raw) {
  const double s = raw >= 0 ? 1.0 / (1.0 + std::exp(-raw)) : std::exp(raw) / (1.0 + std::exp(raw));
  return spec.upper * s;
}

double HyperParamVector::to_raw(const HyperSpec& spec, double value) {
  if (!(value > 0.0 && value < spec.upper)) {
    throw ContractError("hyperparameter '" + spec.name + "' value " + std::to_string(value) + " outside (0, " +
                        std::to_string(spec.upper) + ")");
  }
  const double p = value / spec.upper;
  return std::log(p) - std::log1p(-p);
}

std::vector<double> HyperParamVector::constrained() const {
  std::vector<double> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = constrained(i);
  return out;
}

std::vector<std::string> HyperParamVector::names() const {
  std::vector<std::string> out;
  for (const auto& s : specs_) out.push_back(s.name);
  return out;
}

ad::Var constrained_entry(ad::Var lambda_raw, const HyperSpec& spec, std::size_t index) {
  ad::Var s = ad::sigmoid(ad::select(lambda_raw, index));
  return spec.upper == 1.0 ? s : ad::scale(s, spec.upper);
}

}  // namespace cpmlho::nn
