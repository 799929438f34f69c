#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpmlho/csv.hpp"
#include "cpmlho/grad_check.hpp"
#include "cpmlho/model.hpp"

namespace cpmlho::check {

inline constexpr double kTolerance = 1e-4;

/// A scalar graph around one op, at a fixed random point.
struct OpCase {
  std::string name;
  std::vector<ad::NamedTensor> point;
  ad::GraphBuilder build;
};

/// Every differentiable op the library records, plus the composite layers
/// (hyper layer, relaxed dropout, soft cutout, cut) with frozen noise.
std::vector<OpCase> registered_ops(std::uint64_t seed);

struct CheckLine {
  std::string name;
  std::string kind;  // "op" or "hypergradient"
  double max_rel_error = 0.0;
  bool passed = false;
};

CheckLine check_op(const OpCase& op, double tolerance = kTolerance);

/// Mixed-objective hypergradient with respect to raw lambda on a tiny model
/// and batch, against central differences of the same objective.
CheckLine check_hypergradient(const std::string& name, const nn::ModelSpec& spec, std::uint64_t seed,
                              double tolerance = kTolerance);

struct SuiteReport {
  std::vector<CheckLine> lines;

  bool passed() const;
  std::vector<std::string> failures() const;
  /// Columns: check, kind, max_rel_error, status.
  csv::Table table() const;
};

/// Registered ops, then `extra` ops, then the hypergradient on a toy MLP and a toy CNN.
SuiteReport run_suite(std::uint64_t seed, const std::vector<OpCase>& extra = {}, double tolerance = kTolerance);

}  // namespace cpmlho::check
