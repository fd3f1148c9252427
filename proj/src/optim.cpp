#include "metashift/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace metashift {

double StepDecay::rate(std::size_t iteration) const {
  const auto halvings = iteration / halve_every;
  return std::max(floor, std::ldexp(init, -static_cast<int>(std::min<std::size_t>(halvings, 2000))));
}

void StepDecay::validate(const char* what) const {
  if (!(floor > 0.0) || !(floor <= init)) {
    throw std::invalid_argument(std::string(what) + ": rate schedule needs 0 < floor <= init");
  }
  if (halve_every < 1) throw std::invalid_argument(std::string(what) + ": halving interval must be >= 1");
}

std::vector<Tensor> sgd_step(std::span<const Tensor> params, std::span<const Tensor> grads, double rate) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) throw ShapeError("sgd_step", "parameter and gradient shapes differ");
    auto p = params[i].data();
    auto g = grads[i].data();
    std::vector<double> v(p.size());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = p[k] - rate * g[k];
    out.push_back(Tensor::from(params[i].shape(), std::move(v), true));
  }
  return out;
}

}  // namespace metashift
