#include "metashift/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "metashift/ops.hpp"

namespace metashift {

std::vector<const Node*> topological_order(const Tensor& root) {
  std::vector<const Node*> order;
  if (!root.defined()) return order;
  std::unordered_set<const Node*> visited;
  // (node, next parent to visit)
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node* parent = node->parents[next++].node();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  std::unordered_set<const Node*> targets;
  for (const auto& t : wrt) {
    if (t.defined()) targets.insert(t.node());
  }

  auto order = loss.requires_grad() ? topological_order(loss) : std::vector<const Node*>{};
  std::unordered_set<const Node*> relevant;
  for (const Node* node : order) {
    bool hit = targets.count(node) > 0;
    for (const auto& p : node->parents) hit = hit || relevant.count(p.node()) > 0;
    if (hit) relevant.insert(node);
  }

  std::unordered_map<const Node*, Tensor> grads;
  if (relevant.count(loss.node())) grads[loss.node()] = Tensor::full(loss.shape(), 1.0);

  GradModeGuard mode(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    const Tensor upstream = found->second;
    bool feeds_target = false;
    for (const auto& p : node->parents) feeds_target = feeds_target || relevant.count(p.node()) > 0;
    if (!feeds_target) continue;
    std::vector<Tensor> parent_grads = node->backward(upstream);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node* parent = node->parents[i].node();
      if (!relevant.count(parent)) continue;
      auto slot = grads.find(parent);
      if (slot == grads.end()) {
        grads.emplace(parent, parent_grads[i]);
      } else {
        slot->second = ops::add(slot->second, parent_grads[i]);
      }
    }
  }

  for (const auto& t : wrt) {
    auto found = t.defined() ? grads.find(t.node()) : grads.end();
    if (found != grads.end()) {
      result.push_back(create_graph ? found->second : found->second.detach());
    } else {
      result.push_back(Tensor::zeros(t.shape()));
    }
  }
  return result;
}

std::vector<Tensor> finite_difference_gradient(const ScalarFn& loss_fn, std::span<const Tensor> params,
                                               double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_gradient: epsilon must be positive");
  std::vector<Tensor> probe(params.begin(), params.end());
  std::vector<Tensor> result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> base = params[p].to_vector();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto perturbed = base;
      perturbed[i] = base[i] + epsilon;
      probe[p] = Tensor::from(params[p].shape(), perturbed);
      const double up = loss_fn(probe);
      perturbed[i] = base[i] - epsilon;
      probe[p] = Tensor::from(params[p].shape(), perturbed);
      const double down = loss_fn(probe);
      g[i] = (up - down) / (2.0 * epsilon);
    }
    probe[p] = params[p];
    result.push_back(Tensor::from(params[p].shape(), std::move(g)));
  }
  return result;
}

double max_relative_error(std::span<const Tensor> a, std::span<const Tensor> b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: tensor lists differ in length");
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    auto x = a[t].data();
    auto y = b[t].data();
    if (x.size() != y.size()) throw std::invalid_argument("max_relative_error: tensor sizes differ");
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double denom = std::max({std::abs(x[i]), std::abs(y[i]), floor});
      worst = std::max(worst, std::abs(x[i] - y[i]) / denom);
    }
  }
  return worst;
}

std::vector<Tensor> unroll_inner_steps(const LossBuilder& inner_loss, std::span<const Tensor> init,
                                       const UnrollOptions& options) {
  if (options.steps < 1) {
    throw std::invalid_argument("unrolled steps must be >= 1, got " + std::to_string(options.steps));
  }
  GradModeGuard mode(options.track_graph);
  std::vector<Tensor> current;
  current.reserve(init.size());
  for (const auto& t : init) current.push_back(t.requires_grad() ? t : t.as_leaf());

  for (int step = 0; step < options.steps; ++step) {
    if (!options.track_graph) {
      for (auto& t : current) t = t.as_leaf();
    }
    Tensor loss = [&] {
      GradModeGuard record(true);
      return inner_loss(current);
    }();
    if (!std::isfinite(loss.item())) {
      throw AutodiffError("non-finite inner loss at step " + std::to_string(step));
    }
    const bool second_order = options.track_graph && !options.first_order;
    std::vector<Tensor> g = grad(loss, current, second_order);
    std::vector<Tensor> next;
    next.reserve(current.size());
    for (std::size_t i = 0; i < current.size(); ++i) {
      Tensor updated = ops::sub(current[i], ops::scale(g[i], options.inner_lr));
      if (!all_finite(updated.data())) {
        throw AutodiffError("non-finite inner parameters after step " + std::to_string(step));
      }
      next.push_back(updated);
    }
    current = std::move(next);
  }
  if (!options.track_graph) {
    for (auto& t : current) t = t.detach();
  }
  return current;
}

UnrolledGradient grad_through_unrolled_steps(const LossBuilder& inner_loss, const LossBuilder& meta_loss,
                                             std::span<const Tensor> outer, std::span<const Tensor> inner_init,
                                             const UnrollOptions& options) {
  for (const auto& t : outer) {
    if (!t.requires_grad()) throw AutodiffError("outer parameters must require grad");
  }
  UnrollOptions opts = options;
  opts.track_graph = true;
  UnrolledGradient out;
  out.adapted = unroll_inner_steps(inner_loss, inner_init, opts);
  GradModeGuard mode(true);
  Tensor loss = meta_loss(out.adapted);
  out.meta_loss = loss.item();
  if (!std::isfinite(out.meta_loss)) throw AutodiffError("non-finite meta loss after " + std::to_string(opts.steps) + " steps");
  out.outer_grads = grad(loss, outer, false);
  return out;
}

}  // namespace metashift
