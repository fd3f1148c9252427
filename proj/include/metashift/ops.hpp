#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "metashift/tensor.hpp"

/// Differentiable primitives. Every backward is expressed with these same
/// primitives, so gradients can themselves be differentiated.
namespace metashift::ops {

using IndexMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Repeats a rank-1 tensor of length shape[axis] along every other axis of
/// `shape`.
Tensor broadcast_axis(const Tensor& x, const Shape& shape, std::size_t axis);
/// Sums everything except `axis`; inverse pairing of broadcast_axis.
Tensor reduce_to_axis(const Tensor& x, std::size_t axis);

Tensor broadcast_scalar(const Tensor& s, const Shape& shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// out[i] = index[i] < 0 ? 0 : x[index[i]]
Tensor gather(const Tensor& x, IndexMap index, Shape out_shape);
/// out[index[i]] += g[i] for index[i] >= 0
Tensor scatter_add(const Tensor& g, IndexMap index, Shape out_shape);

/// slope 0 gives plain ReLU.
Tensor leaky_relu(const Tensor& x, double slope);
Tensor relu(const Tensor& x);

/// Row-wise softmax of [n,c].
Tensor softmax(const Tensor& logits);
/// Mean softmax cross-entropy of [n,c] logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// x [n,in] W [out,in] b [out] -> [n,out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Stride-1 cross-correlation. x [n,c,h,w], kernel [f,c,kh,kw] -> [n,f,h',w'].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t padding);
/// Adds a per-channel bias to [n,c,h,w].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// 2x2 window, stride 2, floor on odd sizes.
Tensor max_pool2x2(const Tensor& x);
/// [n,c,h,w] -> [n,c]
Tensor global_mean_pool(const Tensor& x);

/// Index of the largest entry in each row of [n,c]; ties go to the lowest
/// index. Not differentiable.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace metashift::ops
