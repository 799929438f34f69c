#include "cpmlho/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "cpmlho/errors.hpp"

namespace cpmlho::ad {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (!analytic.same_shape(numeric)) {
    throw DimensionError("gradient shapes differ: " + shape_to_string(analytic.shape()) + " vs " +
                         shape_to_string(numeric.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    if (std::isnan(e)) return e;
    worst = std::max(worst, e);
  }
  return worst;
}

double GradientReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& l : leaves) {
    if (std::isnan(l.max_rel_error)) return l.max_rel_error;
    worst = std::max(worst, l.max_rel_error);
  }
  return worst;
}

bool GradientReport::all_finite() const {
  return std::all_of(leaves.begin(), leaves.end(), [](const LeafCheck& l) { return l.finite; });
}

namespace {

double evaluate(const GraphBuilder& fn, const std::vector<NamedTensor>& point) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(tape.leaf(p.value, p.name));
  return fn(tape, leaves).value().item();
}

}  // namespace

GradientReport grad_check(const GraphBuilder& fn, const std::vector<NamedTensor>& point, double h) {
  if (!(h > 0.0)) throw ContractError("grad_check: step must be positive");

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : point) leaves.push_back(tape.leaf(p.value, p.name));
  const Var loss = fn(tape, leaves);
  const Gradients grads = backward(tape, loss);

  GradientReport report;
  std::vector<NamedTensor> probe = point;
  for (std::size_t li = 0; li < point.size(); ++li) {
    LeafCheck check;
    check.name = point[li].name;
    check.analytic = grads[leaves[li]];
    check.finite = check.analytic.all_finite();
    check.numeric = Tensor::zeros_like(point[li].value);
    for (std::size_t i = 0; i < point[li].value.numel(); ++i) {
      const double x0 = point[li].value[i];
      probe[li].value[i] = x0 + h;
      const double fp = evaluate(fn, probe);
      probe[li].value[i] = x0 - h;
      const double fm = evaluate(fn, probe);
      probe[li].value[i] = x0;
      check.numeric[i] = (fp - fm) / (2.0 * h);
    }
    check.max_rel_error = check.finite ? max_relative_error(check.analytic, check.numeric)
                                       : std::numeric_limits<double>::infinity();
    report.leaves.push_back(std::move(check));
  }
  return report;
}

}  // namespace cpmlho::ad
