#include "metashift/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace metashift {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor", "shape " + shape_str(shape) + " holds " +
                                   std::to_string(shape_numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::make_shared<const std::vector<double>>(std::move(values));
  node->requires_grad = requires_grad;
  return node;
}

const Node& checked(const std::shared_ptr<const Node>& node) {
  if (!node) throw std::logic_error("access to an undefined tensor");
  return *node;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& primitive, const std::string& detail)
    : std::invalid_argument(primitive + ": " + detail) {}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).values->size(); }

std::span<const double> Tensor::data() const { return *checked(node_).values; }

std::vector<double> Tensor::to_vector() const { return *checked(node_).values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "expected one element, shape is " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_history() const { return node_ && static_cast<bool>(node_->backward); }

std::string Tensor::op_name() const { return checked(node_).op; }

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  auto leaf = std::make_shared<Node>();
  leaf->shape = n.shape;
  leaf->values = n.values;
  return Tensor(std::move(leaf));
}

Tensor Tensor::as_leaf() const {
  const auto& n = checked(node_);
  auto leaf = std::make_shared<Node>();
  leaf->shape = n.shape;
  leaf->values = n.values;
  leaf->requires_grad = true;
  return Tensor(std::move(leaf));
}

Tensor Tensor::make_result(const char* op, Shape shape, std::vector<double> values,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = make_leaf(std::move(shape), std::move(values), false);
  node->op = op;
  bool record = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) record = record || in.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->parents = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_mode_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::uint64_t hash_tensors(std::span<const Tensor> tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& t : tensors) {
    for (auto d : t.shape()) {
      std::uint64_t d64 = d;
      mix(&d64, sizeof d64);
    }
    auto values = t.data();
    mix(values.data(), values.size() * sizeof(double));
  }
  return h;
}

}  // namespace metashift
