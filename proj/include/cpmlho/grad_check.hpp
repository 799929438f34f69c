#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cpmlho/tape.hpp"

namespace cpmlho::ad {

/// Floor on the denominator of the relative error.
inline constexpr double kRelErrorFloor = 1e-8;

/// |a - f| / max(|a|, |f|, 1e-8)
double relative_error(double analytic, double numeric);
/// Elementwise maximum of relative_error over two same-shaped tensors.
double max_relative_error(const Tensor& analytic, const Tensor& numeric);

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct LeafCheck {
  std::string name;
  Tensor analytic;
  Tensor numeric;
  double max_rel_error = 0.0;
  bool finite = true;
};

struct GradientReport {
  std::vector<LeafCheck> leaves;

  double max_rel_error() const;
  bool all_finite() const;
  bool passed(double tolerance) const { return all_finite() && max_rel_error() <= tolerance; }
};

/// Builds a scalar graph on `tape` from leaves bound to the current point.
/// Must be deterministic: stochastic pieces reseed from a fixed seed on every call.
using GraphBuilder = std::function<Var(Tape& tape, std::span<const Var> leaves)>;

/// Compares reverse-mode gradients with central differences of step h.
/// Non-finite analytic gradients are flagged in the report, not thrown.
GradientReport grad_check(const GraphBuilder& fn, const std::vector<NamedTensor>& point, double h = 1e-5);

}  // namespace cpmlho::ad
