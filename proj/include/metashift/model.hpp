#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metashift/rng.hpp"
#include "metashift/tensor.hpp"

namespace metashift {

class FrozenError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class LayerKind { Conv, Linear };

struct LayerSpec {
  LayerKind kind = LayerKind::Linear;
  /// Input channels (conv) or input features (linear).
  std::size_t in = 0;
  /// Filters (conv) or output neurons (linear).
  std::size_t out = 0;
  /// Square kernel side; 1 for linear layers.
  std::size_t kernel = 1;
  std::size_t padding = 0;
  bool pool = false;
};

/// Layer sizes of a feature extractor. Conv layers run conv, bias,
/// activation and optional 2x2 max-pool; a conv stack ends in a global mean
/// pool. Linear layers run affine map then activation.
struct Arch {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  /// Negative-side slope of the activation; 0 is ReLU.
  double slope = 0.0;

  static Arch mlp(std::size_t in, std::size_t hidden, std::size_t feature_dim, double slope = 0.1);
  /// 3x3 same-padded conv layers with a 2x2 max-pool after each.
  static Arch conv(Shape input_shape, const std::vector<std::size_t>& filters, std::size_t kernel = 3);

  std::size_t feature_dim() const;
  /// Throws std::invalid_argument when consecutive layer sizes disagree.
  void validate() const;
  std::string describe() const;

  std::vector<double> encode() const;
  static Arch decode(std::span<const double> code);
};

struct Layer {
  LayerSpec spec;
  Tensor weight;  // conv [out,in,k,k], linear [out,in]
  Tensor bias;    // [out]
};

/// Parameters used for one layer during a forward pass. Undefined scale and
/// shift mean the layer runs unmodulated.
struct LayerParams {
  Tensor weight, bias;
  Tensor scale, shift;
};

/// Runs `x` through layers described by `arch` with the given parameters.
/// The core of every extractor forward variant.
Tensor run_layers(const Arch& arch, std::span<const LayerParams> params, const Tensor& x);

/// Per-neuron scale/shift pairs attached to a subset of extractor layers.
struct SSParams {
  std::vector<std::size_t> layers;
  std::vector<Tensor> scale;
  std::vector<Tensor> shift;

  /// Tensors in the order scale0, shift0, scale1, shift1, ...
  std::vector<Tensor> tensors() const;
  static SSParams from_tensors(std::vector<std::size_t> layers, std::span<const Tensor> tensors);
  std::size_t count() const;
};

class FeatureExtractor {
 public:
  /// He-normal weights, zero biases.
  FeatureExtractor(Arch arch, Rng& rng);
  FeatureExtractor(Arch arch, std::vector<Layer> layers);

  const Arch& arch() const { return arch_; }
  std::size_t num_layers() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// Replaces one layer's weights. Throws FrozenError once frozen.
  void set_layer(std::size_t i, const Tensor& weight, const Tensor& bias);
  /// weight0, bias0, weight1, bias1, ...
  std::vector<Tensor> parameters() const;
  std::uint64_t weight_hash() const;

  Tensor forward(const Tensor& x) const;
  /// Forward with replacement weights in parameters() order.
  Tensor forward_with(const Tensor& x, std::span<const Tensor> weights) const;
  /// Forward with the stored weights modulated by `ss`. Gradients reach the
  /// SS tensors only.
  Tensor ss_forward(const Tensor& x, const SSParams& ss) const;

  /// Fresh SS for the given layers: scales 1, shifts 0.
  SSParams init_ss(const std::vector<std::size_t>& layers) const;
  SSParams init_ss() const;
  /// Throws naming the first layer whose SS shapes do not match.
  void check_ss(const SSParams& ss) const;

 private:
  Arch arch_;
  std::vector<Layer> layers_;
  bool frozen_ = false;
};

/// One or more fully connected layers, ReLU between them, mapping features
/// to `way` logits.
struct Classifier {
  std::vector<Tensor> params;  // weight0, bias0, weight1, bias1, ...

  std::size_t feature_dim() const;
  std::size_t way() const;
  Tensor forward(const Tensor& features) const;
  static Tensor forward_with(const Tensor& features, std::span<const Tensor> params);
};

/// Weights uniform in +-1/sqrt(fan_in), zero biases. `hidden` adds
/// intermediate layers.
Classifier init_classifier(std::size_t feature_dim, std::size_t way, Rng& rng,
                           const std::vector<std::size_t>& hidden = {});
/// Discards `old` and returns a freshly initialized classifier of the
/// requested shape.
Classifier reset_classifier(Classifier&& old, std::size_t feature_dim, std::size_t way, Rng& rng,
                            const std::vector<std::size_t>& hidden = {});

/// Exact non-negative fraction kept in lowest terms.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Ratio of(std::uint64_t num, std::uint64_t den);
  double value() const { return double(num) / double(den); }
  std::string str() const;
  friend bool operator==(const Ratio&, const Ratio&) = default;
  friend bool operator<(const Ratio& a, const Ratio& b) { return a.num * b.den < b.num * a.den; }
};

enum class CountMode { SS, FT };

struct LayerCount {
  std::size_t layer = 0;
  std::uint64_t ft = 0;
  std::uint64_t ss = 0;
  Ratio ratio;  // ss / ft
};

struct ParamReport {
  std::vector<LayerCount> layers;
  std::uint64_t ft_total = 0;
  std::uint64_t ss_total = 0;
  Ratio ratio;

  std::uint64_t total(CountMode mode) const { return mode == CountMode::SS ? ss_total : ft_total; }
};

/// FT counts every weight and bias scalar; SS counts two per neuron/filter.
ParamReport count_params(const Arch& arch);

struct GroupStats {
  std::size_t count = 0;
  double mean = 0.0;
  /// Population variance.
  double variance = 0.0;
  double lo = 0.0, hi = 0.0;
  /// Equal-width bins over [lo, hi]; values outside land in the edge bins.
  std::vector<std::size_t> bins;

  /// "# bin_lo bin_hi count" header and one row per bin.
  std::string columns() const;
};

struct SSStatistics {
  GroupStats scale;
  GroupStats shift;
};

inline constexpr std::size_t kHistogramBins = 20;

SSStatistics ss_statistics(const SSParams& ss);
GroupStats group_statistics(std::span<const double> values, double lo, double hi, std::size_t bins = kHistogramBins);

}  // namespace metashift
