#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "metashift/tensor.hpp"

namespace metashift {

/// rate(i) = max(floor, init * 0.5^floor(i / halve_every)).
struct StepDecay {
  double init = 0.001;
  double floor = 0.0001;
  std::size_t halve_every = 5000;

  double rate(std::size_t iteration) const;
  /// Throws std::invalid_argument unless 0 < floor <= init and halve_every >= 1.
  void validate(const char* what) const;
};

/// p - rate * g for each pair, as fresh leaves that require grad.
std::vector<Tensor> sgd_step(std::span<const Tensor> params, std::span<const Tensor> grads, double rate);

}  // namespace metashift
