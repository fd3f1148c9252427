#include "metashift/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "metashift/autodiff.hpp"
#include "metashift/ops.hpp"

namespace metashift {

namespace {

constexpr std::size_t kEvalChunk = 256;

double fraction_correct(const std::vector<int>& predicted, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == labels[i];
  return predicted.empty() ? 0.0 : double(correct) / double(predicted.size());
}

}  // namespace

void PretrainConfig::validate() const {
  rate.validate("pretrain");
  if (batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  if (iterations < 1) throw std::invalid_argument("pretrain: iterations must be >= 1");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("pretrain: holdout_fraction must be in [0, 1)");
  }
  if (dropout_keep != 1.0) throw std::invalid_argument("pretrain: dropout is not supported (dropout_keep must be 1)");
  if (log_every < 1) throw std::invalid_argument("pretrain: log_every must be >= 1");
}

Tensor batch_loss(const FeatureExtractor& extractor, std::span<const Tensor> extractor_weights,
                  std::span<const Tensor> classifier, const Tensor& x, const std::vector<int>& labels) {
  Tensor features = extractor.forward_with(x, extractor_weights);
  return ops::softmax_cross_entropy(Classifier::forward_with(features, classifier), labels);
}

double accuracy_on(const Dataset& dataset, std::span<const std::size_t> indices, const std::vector<int>& labels,
                   const FeatureExtractor& extractor, const Classifier& classifier) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const std::size_t end = std::min(indices.size(), start + kEvalChunk);
    const auto chunk = indices.subspan(start, end - start);
    auto predicted = ops::argmax_rows(classifier.forward(extractor.forward(dataset.batch(chunk))));
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == labels[start + i];
  }
  return indices.empty() ? 0.0 : double(correct) / double(indices.size());
}

PretrainResult pretrain(const Dataset& dataset, const std::vector<int>& classes, FeatureExtractor extractor,
                        Classifier big_classifier, const PretrainConfig& cfg, MetricsLog* log) {
  cfg.validate();
  if (extractor.frozen()) throw FrozenError("pretrain: extractor is already frozen");
  if (classes.empty()) throw std::invalid_argument("pretrain: no classes");
  if (big_classifier.way() != classes.size()) {
    throw std::invalid_argument("pretrain: classifier has " + std::to_string(big_classifier.way()) +
                                " outputs for " + std::to_string(classes.size()) + " classes");
  }
  if (big_classifier.feature_dim() != extractor.arch().feature_dim()) {
    throw std::invalid_argument("pretrain: classifier input does not match extractor feature dim");
  }

  Rng rng(cfg.seed);
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < classes.size(); ++i) relabel[classes[i]] = static_cast<int>(i);
  std::vector<std::size_t> train, holdout;
  for (int c : classes) {
    std::vector<std::size_t> samples = dataset.class_samples(c);
    rng.shuffle(samples);
    const auto held = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * double(samples.size())));
    if (held >= samples.size()) throw DatasetError("pretrain: holdout leaves class " + std::to_string(c) + " empty");
    holdout.insert(holdout.end(), samples.begin(), samples.begin() + std::ptrdiff_t(held));
    train.insert(train.end(), samples.begin() + std::ptrdiff_t(held), samples.end());
  }
  auto labels_of = [&](std::span<const std::size_t> idx) {
    std::vector<int> y;
    for (auto i : idx) y.push_back(relabel.at(dataset.label(i)));
    return y;
  };

  std::vector<Tensor> weights = extractor.parameters();
  std::vector<Tensor> head = big_classifier.params;
  const std::size_t n_weights = weights.size();
  std::vector<std::size_t> order = train;
  rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<CurvePoint> curve;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(cfg.batch_size, train.size())) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const auto y = labels_of(batch);

    std::vector<Tensor> params;
    for (const auto& w : weights) params.push_back(w.as_leaf());
    for (const auto& h : head) params.push_back(h.as_leaf());
    std::span<const Tensor> all(params);
    Tensor logits = Classifier::forward_with(extractor.forward_with(dataset.batch(batch), all.first(n_weights)),
                                             all.subspan(n_weights));
    Tensor loss = ops::softmax_cross_entropy(logits, y);
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("pretrain: non-finite loss at iteration " + std::to_string(it));
    }
    const auto grads = grad(loss, params);
    const double rate = cfg.rate.rate(it);
    auto stepped = sgd_step(params, grads, rate);
    for (std::size_t i = 0; i < n_weights; ++i) weights[i] = stepped[i].detach();
    for (std::size_t i = 0; i < head.size(); ++i) head[i] = stepped[n_weights + i].detach();

    CurvePoint point{it, rate, loss.item(), fraction_correct(ops::argmax_rows(logits), y)};
    curve.push_back(point);
    if (log && (it % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
      log->write("pretrain", it, {{"loss", point.loss}, {"accuracy", point.batch_accuracy}, {"rate", rate}});
    }
  }

  for (std::size_t i = 0; i < extractor.num_layers(); ++i) extractor.set_layer(i, weights[2 * i], weights[2 * i + 1]);
  Classifier trained{head};
  const double train_acc = accuracy_on(dataset, train, labels_of(train), extractor, trained);
  const double holdout_acc = holdout.empty() ? -1.0 : accuracy_on(dataset, holdout, labels_of(holdout), extractor, trained);
  extractor.freeze();
  if (log) {
    log->write("pretrain", cfg.iterations,
               {{"event", "done"}, {"train_accuracy", train_acc}, {"holdout_accuracy", holdout_acc}});
  }
  return PretrainResult{std::move(extractor), std::move(curve), train_acc, holdout_acc};
}

}  // namespace metashift
