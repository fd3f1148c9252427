#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "metashift/dataset.hpp"
#include "metashift/metrics.hpp"
#include "metashift/model.hpp"
#include "metashift/optim.hpp"

namespace metashift {

struct PretrainConfig {
  StepDecay rate{0.001, 0.0001, 5000};
  std::size_t batch_size = 32;
  std::size_t iterations = 400;
  /// Per-class share of samples held out from training for model selection.
  double holdout_fraction = 0.0;
  /// Placeholder; any value other than 1 is rejected.
  double dropout_keep = 1.0;
  std::vector<std::size_t> classifier_hidden;
  std::uint64_t seed = 1;
  std::size_t log_every = 10;

  void validate() const;
};

struct CurvePoint {
  std::size_t iteration = 0;
  double rate = 0.0;
  double loss = 0.0;
  double batch_accuracy = 0.0;
};

struct PretrainResult {
  FeatureExtractor extractor;
  std::vector<CurvePoint> curve;
  /// Accuracy of the final [extractor; classifier] on every training sample.
  double train_accuracy = 0.0;
  /// -1 when nothing is held out.
  double holdout_accuracy = -1.0;
};

/// Mean cross-entropy of the extractor + classifier on one batch, as a
/// recorded scalar.
Tensor batch_loss(const FeatureExtractor& extractor, std::span<const Tensor> extractor_weights,
                  std::span<const Tensor> classifier, const Tensor& x, const std::vector<int>& labels);

/// Trains extractor and classifier jointly with minibatch SGD on all
/// samples of `classes` (relabelled 0..n-1). The classifier must have one
/// output per class and is dropped; the returned extractor is frozen.
PretrainResult pretrain(const Dataset& dataset, const std::vector<int>& classes, FeatureExtractor extractor,
                        Classifier big_classifier, const PretrainConfig& cfg, MetricsLog* log = nullptr);

/// Accuracy of `extractor` + `classifier` over `indices`, evaluated in chunks.
double accuracy_on(const Dataset& dataset, std::span<const std::size_t> indices, const std::vector<int>& labels,
                   const FeatureExtractor& extractor, const Classifier& classifier);

}  // namespace metashift
