#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cpmlho/tape.hpp"
#include "cpmlho/tensor.hpp"

namespace cpmlho::nn {

enum class HyperKind { DropoutRate, CutoutHoles, CutoutLength };

/// One tunable entry. Its task-facing value is upper * sigmoid(raw), so
/// dropout rates (upper = 1) live in (0, 1) and cutout entries in (0, upper).
struct HyperSpec {
  HyperKind kind = HyperKind::DropoutRate;
  std::string name;
  double upper = 1.0;
};

/// The hyperparameter vector: unconstrained raw values plus their transforms.
/// The hypernetwork reads the raw values; dropout and cutout read the
/// constrained ones.
class HyperParamVector {
 public:
  HyperParamVector() = default;
  HyperParamVector(std::vector<HyperSpec> specs, Tensor raw);

  /// Builds the vector from task-facing values, each strictly inside its range.
  static HyperParamVector from_constrained(std::vector<HyperSpec> specs, const std::vector<double>& values);

  static double to_constrained(const HyperSpec& spec, double raw);
  static double to_raw(const HyperSpec& spec, double value);

  std::size_t size() const noexcept { return specs_.size(); }
  const std::vector<HyperSpec>& specs() const noexcept { return specs_; }
  const HyperSpec& spec(std::size_t i) const { return specs_.at(i); }
  const Tensor& raw() const noexcept { return raw_; }
  Tensor& raw() noexcept { return raw_; }

  double constrained(std::size_t i) const { return to_constrained(specs_.at(i), raw_[i]); }
  std::vector<double> constrained() const;
  std::vector<std::string> names() const;

 private:
  std::vector<HyperSpec> specs_;
  Tensor raw_;
};

/// Differentiable task-facing value of entry `index` of a raw-lambda node.
ad::Var constrained_entry(ad::Var lambda_raw, const HyperSpec& spec, std::size_t index);

}  // namespace cpmlho::nn
