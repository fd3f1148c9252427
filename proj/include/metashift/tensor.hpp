#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metashift {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when the operands of a primitive do not conform. The message names
/// the primitive and the offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& primitive, const std::string& detail);
};

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor;
struct Node;

/// Maps the gradient flowing into a node onto gradients for each of its
/// parents. Implementations are written in terms of differentiable ops, so
/// running them with recording enabled yields higher-order graphs.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

/// Immutable dense array of doubles, optionally carrying the record of the
/// operation that produced it. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  /// True when this tensor was produced by a recorded op (not a leaf).
  bool has_history() const;
  std::string op_name() const;

  /// Same values, cut from any history, not requiring grad.
  Tensor detach() const;
  /// Fresh leaf with the same values that requires grad.
  Tensor as_leaf() const;

  const Node* node() const { return node_.get(); }

  /// Internal: builds a recorded result. Records only when grad mode is on
  /// and at least one input requires grad; otherwise returns a plain value.
  static Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs, BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

struct Node {
  const char* op = "leaf";
  Shape shape;
  std::shared_ptr<const std::vector<double>> values;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  BackwardFn backward;
};

bool grad_mode_enabled();

/// Scoped switch for op recording on the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

bool all_finite(std::span<const double> values);

/// FNV-1a over the raw bytes of the given tensors' values and shapes.
std::uint64_t hash_tensors(std::span<const Tensor> tensors);

}  // namespace metashift
