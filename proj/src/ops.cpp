#include "metashift/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace metashift::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, "operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
  }
}

template <typename F>
std::vector<double> zip(const Tensor& a, const Tensor& b, F f) {
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

// Product of dims after `axis`.
std::size_t inner_extent(const Shape& shape, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) n *= shape[i];
  return n;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return Tensor::make_result("add", a.shape(), zip(a, b, [](double x, double y) { return x + y; }), {a, b},
                             [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return Tensor::make_result("sub", a.shape(), zip(a, b, [](double x, double y) { return x - y; }), {a, b},
                             [](const Tensor& g) { return std::vector<Tensor>{g, scale(g, -1.0)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return Tensor::make_result("mul", a.shape(), zip(a, b, [](double x, double y) { return x * y; }), {a, b},
                             [a, b](const Tensor& g) { return std::vector<Tensor>{mul(g, b), mul(g, a)}; });
}

Tensor scale(const Tensor& a, double factor) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result("scale", a.shape(), std::move(out), {a},
                             [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return Tensor::make_result("add_scalar", a.shape(), std::move(out), {a},
                             [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2, "left operand");
  require_rank("matmul", b, 2, "right operand");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yrow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xv * yrow[j];
    }
  }
  return Tensor::make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2, "operand");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  }
  return Tensor::make_result("transpose", {c, r}, std::move(out), {a},
                             [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Shape original = a.shape();
  return Tensor::make_result("reshape", std::move(shape), a.to_vector(), {a}, [original](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, original)};
  });
}

Tensor broadcast_axis(const Tensor& x, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size() || x.rank() != 1 || x.dim(0) != shape[axis]) {
    throw ShapeError("broadcast_axis", "cannot spread " + shape_str(x.shape()) + " along axis " +
                                           std::to_string(axis) + " of " + shape_str(shape));
  }
  const std::size_t inner = inner_extent(shape, axis);
  const std::size_t extent = shape[axis];
  auto v = x.data();
  std::vector<double> out(shape_numel(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[(i / inner) % extent];
  return Tensor::make_result("broadcast_axis", shape, std::move(out), {x}, [axis](const Tensor& g) {
    return std::vector<Tensor>{reduce_to_axis(g, axis)};
  });
}

Tensor reduce_to_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("reduce_to_axis", "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const Shape shape = x.shape();
  const std::size_t inner = inner_extent(shape, axis);
  const std::size_t extent = shape[axis];
  auto v = x.data();
  std::vector<double> out(extent, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) out[(i / inner) % extent] += v[i];
  return Tensor::make_result("reduce_to_axis", {extent}, std::move(out), {x}, [shape, axis](const Tensor& g) {
    return std::vector<Tensor>{broadcast_axis(g, shape, axis)};
  });
}

Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("broadcast_scalar", "operand is not a scalar: " + shape_str(s.shape()));
  Shape scalar_shape = s.shape();
  return Tensor::make_result("broadcast_scalar", shape, std::vector<double>(shape_numel(shape), s.data()[0]), {s},
                             [scalar_shape](const Tensor& g) {
                               return std::vector<Tensor>{reshape(sum(g), scalar_shape)};
                             });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Shape shape = x.shape();
  return Tensor::make_result("sum", {}, {total}, {x}, [shape](const Tensor& g) {
    return std::vector<Tensor>{broadcast_scalar(g, shape)};
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty operand");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor gather(const Tensor& x, IndexMap index, Shape out_shape) {
  if (!index || index->size() != shape_numel(out_shape)) {
    throw ShapeError("gather", "index map size does not match output shape " + shape_str(out_shape));
  }
  auto v = x.data();
  const auto limit = static_cast<std::ptrdiff_t>(v.size());
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto j = (*index)[i];
    if (j >= limit) throw ShapeError("gather", "index " + std::to_string(j) + " exceeds source " + shape_str(x.shape()));
    out[i] = j < 0 ? 0.0 : v[static_cast<std::size_t>(j)];
  }
  Shape source = x.shape();
  return Tensor::make_result("gather", std::move(out_shape), std::move(out), {x}, [index, source](const Tensor& g) {
    return std::vector<Tensor>{scatter_add(g, index, source)};
  });
}

Tensor scatter_add(const Tensor& g, IndexMap index, Shape out_shape) {
  if (!index || index->size() != g.numel()) {
    throw ShapeError("scatter_add", "index map size does not match operand " + shape_str(g.shape()));
  }
  auto v = g.data();
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const auto limit = static_cast<std::ptrdiff_t>(out.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto j = (*index)[i];
    if (j >= limit) throw ShapeError("scatter_add", "index " + std::to_string(j) + " exceeds " + shape_str(out_shape));
    if (j >= 0) out[static_cast<std::size_t>(j)] += v[i];
  }
  Shape source = g.shape();
  return Tensor::make_result("scatter_add", std::move(out_shape), std::move(out), {g},
                             [index, source](const Tensor& gg) {
                               return std::vector<Tensor>{gather(gg, index, source)};
                             });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  auto v = x.data();
  std::vector<double> mask(v.size());
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = v[i] > 0.0 ? 1.0 : slope;
    out[i] = v[i] * mask[i];
  }
  Tensor gate = Tensor::from(x.shape(), std::move(mask));
  return Tensor::make_result(slope == 0.0 ? "relu" : "leaky_relu", x.shape(), std::move(out), {x},
                             [gate](const Tensor& g) { return std::vector<Tensor>{mul(g, gate)}; });
}

Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

Tensor softmax(const Tensor& logits) {
  require_rank("softmax", logits, 2, "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto v = logits.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * c;
    const double peak = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - peak);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return Tensor::make_result("softmax", logits.shape(), std::move(out), {logits}, [logits](const Tensor& g) {
    Tensor y = softmax(logits);
    Tensor row_dot = reduce_to_axis(mul(g, y), 0);
    return std::vector<Tensor>{mul(y, sub(g, broadcast_axis(row_dot, y.shape(), 0)))};
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank("softmax_cross_entropy", logits, 2, "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy",
                     "got " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy", "empty batch");
  std::vector<double> onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ShapeError("softmax_cross_entropy",
                       "label " + std::to_string(labels[i]) + " outside [0," + std::to_string(c) + ")");
    }
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  auto v = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * c;
    const double peak = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - peak);
    total += peak + std::log(z) - row[labels[i]];
  }
  Tensor target = Tensor::from(logits.shape(), std::move(onehot));
  const double inv_n = 1.0 / static_cast<double>(n);
  return Tensor::make_result("softmax_cross_entropy", {}, {total * inv_n}, {logits},
                             [logits, target, inv_n](const Tensor& g) {
                               Tensor coeff = broadcast_scalar(scale(g, inv_n), logits.shape());
                               return std::vector<Tensor>{mul(sub(softmax(logits), target), coeff)};
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", weight, 2, "weight");
  require_rank("linear", bias, 1, "bias");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("linear", "input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear", "bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  Tensor product = matmul(x, transpose(weight));
  return add(product, broadcast_axis(bias, product.shape(), 1));
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t padding) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", kernel, 4, "kernel");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw ShapeError("conv2d", "input has " + std::to_string(c) + " channels, kernel " + shape_str(kernel.shape()) +
                                   " expects " + std::to_string(kernel.dim(1)));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d", "kernel " + shape_str(kernel.shape()) + " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = h + 2 * padding - kh + 1;
  const std::size_t ow = w + 2 * padding - kw + 1;
  const std::size_t patch = c * kh * kw;
  const std::size_t positions = n * oh * ow;

  auto cols = std::make_shared<std::vector<std::ptrdiff_t>>(positions * patch);
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
              const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              (*cols)[k++] = inside ? static_cast<std::ptrdiff_t>(((b * c + ch) * h) * w) + iy * static_cast<std::ptrdiff_t>(w) + ix
                                    : -1;
            }
          }
        }
      }
    }
  }
  Tensor unfolded = gather(x, cols, {positions, patch});
  Tensor responses = matmul(unfolded, transpose(reshape(kernel, {f, patch})));  // [positions, f]

  auto layout = std::make_shared<std::vector<std::ptrdiff_t>>(positions * f);
  k = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < f; ++ch) {
      for (std::size_t p = 0; p < oh * ow; ++p) {
        (*layout)[k++] = static_cast<std::ptrdiff_t>((b * oh * ow + p) * f + ch);
      }
    }
  }
  return gather(responses, layout, {n, f, oh, ow});
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 4, "input");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias", "bias " + shape_str(bias.shape()) + " does not match channels of " +
                                             shape_str(x.shape()));
  }
  return add(x, broadcast_axis(bias, x.shape(), 1));
}

Tensor max_pool2x2(const Tensor& x) {
  require_rank("max_pool2x2", x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2x2", "input " + shape_str(x.shape()) + " smaller than the window");
  auto v = x.data();
  auto winners = std::make_shared<std::vector<std::ptrdiff_t>>(n * c * oh * ow);
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t at = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (v[at] > v[best]) best = at;
          }
        }
        (*winners)[k++] = static_cast<std::ptrdiff_t>(best);
      }
    }
  }
  return gather(x, winners, {n, c, oh, ow});
}

Tensor global_mean_pool(const Tensor& x) {
  require_rank("global_mean_pool", x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor per_plane = reduce_to_axis(reshape(x, {n * c, area}), 0);
  return reshape(scale(per_plane, 1.0 / static_cast<double>(area)), {n, c});
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows", "expects [n,c], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto v = logits.data();
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (v[r * c + k] > v[r * c + best]) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace metashift::ops
