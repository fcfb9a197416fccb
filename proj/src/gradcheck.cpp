#include "bimot/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bimot {

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) throw ContractError("grad_check: parameter " + p.name + " does not require grad");
    p.tensor.node().grad.clear();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    tape.backward(loss);
  }

  auto evaluate = [&f] {
    NoGradScope<double> off;
    return f().item();
  };
  const double base_a = evaluate();
  const double base_b = evaluate();
  if (!(base_a == base_b) && !(std::isnan(base_a) && std::isnan(base_b))) {
    throw OracleInvalidError("grad_check: f is not deterministic (" + std::to_string(base_a) + " vs " +
                             std::to_string(base_b) + ")");
  }

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (const auto& p : params) {
    auto& node = p.tensor.node();
    std::vector<double> analytic = node.grad;
    analytic.resize(node.value.size(), 0.0);
    std::vector<std::size_t> coords(node.value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t idx : coords) {
      const double saved = node.value[idx];
      node.value[idx] = saved + options.step;
      const double up = evaluate();
      node.value[idx] = saved - options.step;
      const double down = evaluate();
      node.value[idx] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coords_checked;
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = rel;
        result.worst_param = p.name;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace bimot
