#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bimot/errors.hpp"
#include "bimot/tensor.hpp"

namespace bimot {

/// f was not reproducible between two evaluations at the same parameters, so
/// finite differences of it mean nothing.
class OracleInvalidError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every coordinate; otherwise a seeded random subset per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

/// Central-difference check of d f / d params. `f` must rebuild its graph from
/// the current parameter values on every call and return a scalar.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace bimot
