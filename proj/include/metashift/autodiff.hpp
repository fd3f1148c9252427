#pragma once

#include <functional>
#include <span>
#include <vector>

#include "metashift/tensor.hpp"

namespace metashift {

/// Reverse-mode gradient of a scalar `loss` with respect to each tensor in
/// `wrt`. Tensors with no path to the loss receive zeros. With
/// `create_graph` the returned gradients are themselves recorded and can be
/// differentiated again.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false);

/// Nodes reachable from `root` through recorded history, parents before
/// children.
std::vector<const Node*> topological_order(const Tensor& root);

using ScalarFn = std::function<double(std::span<const Tensor>)>;

/// Central differences (f(p+eps) - f(p-eps)) / 2eps, one scalar at a time.
std::vector<Tensor> finite_difference_gradient(const ScalarFn& loss_fn, std::span<const Tensor> params,
                                               double epsilon);

/// Largest |a-b| / max(|a|, |b|, floor) over all entries of all tensors.
double max_relative_error(std::span<const Tensor> a, std::span<const Tensor> b, double floor = 1e-8);

using LossBuilder = std::function<Tensor(std::span<const Tensor> inner)>;

struct UnrollOptions {
  int steps = 1;
  double inner_lr = 0.01;
  /// Treat each inner gradient as a constant, dropping the second-order path.
  bool first_order = false;
  /// Record the unrolled updates at all. When false the adapted parameters
  /// are plain values.
  bool track_graph = true;
};

/// Runs `steps` plain gradient-descent updates on `inner_loss` starting from
/// `init`. Inputs that do not require grad are promoted to fresh leaves.
std::vector<Tensor> unroll_inner_steps(const LossBuilder& inner_loss, std::span<const Tensor> init,
                                       const UnrollOptions& options);

struct UnrolledGradient {
  double meta_loss = 0.0;
  std::vector<Tensor> adapted;
  std::vector<Tensor> outer_grads;
};

/// Gradient of `meta_loss(unrolled inner parameters)` with respect to
/// `outer`, following the dependence of the adapted parameters on `outer`.
UnrolledGradient grad_through_unrolled_steps(const LossBuilder& inner_loss, const LossBuilder& meta_loss,
                                             std::span<const Tensor> outer, std::span<const Tensor> inner_init,
                                             const UnrollOptions& options);

}  // namespace metashift
