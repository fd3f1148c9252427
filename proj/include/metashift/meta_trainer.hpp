#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metashift/dataset.hpp"
#include "metashift/episode.hpp"
#include "metashift/model.hpp"
#include "metashift/optim.hpp"

namespace metashift {

/// Which parameters are meta-learned and which adapt per task.
///   SS            scale/shift + classifier init, classifier adapts
///   FTFull        all extractor weights + classifier init, classifier adapts
///   FTBlock       last extractor layer + classifier init, classifier adapts
///   FTClassifier  classifier init only, classifier adapts
///   UpdateTheta   nothing meta-learned, classifier adapts at test
///   UpdateAll     nothing meta-learned, extractor and classifier adapt at test
enum class MetaMode { SS, FTFull, FTBlock, FTClassifier, UpdateTheta, UpdateAll };

MetaMode parse_meta_mode(const std::string& name);
std::string to_string(MetaMode mode);
/// True for modes with no meta-training phase.
bool skips_meta_training(MetaMode mode);

/// Layers that receive scale/shift in SS mode.
enum class SSScope { All, Last };

SSScope parse_ss_scope(const std::string& name);
std::string to_string(SSScope scope);

struct TaskShape {
  std::size_t way = 5;
  std::size_t k_train = 1;
  std::size_t k_test = 15;
};

struct MetaConfig {
  MetaMode mode = MetaMode::SS;
  SSScope ss_scope = SSScope::All;
  /// Base-learner rate.
  double inner_lr = 0.01;
  int inner_epochs = 20;
  /// Meta rate, indexed by meta step.
  StepDecay meta_rate{0.001, 0.0001, 1000};
  std::size_t meta_batch = 2;
  bool first_order = false;
  TaskShape task;

  void validate() const;
};

/// Frozen extractor plus everything the meta-learner owns.
struct MetaState {
  FeatureExtractor extractor;
  MetaMode mode = MetaMode::SS;
  /// Populated in SS mode.
  SSParams ss;
  /// Trainable copies of extractor layers in FT modes.
  std::vector<std::size_t> ft_layers;
  std::vector<Tensor> ft_weights;  // weight, bias per entry of ft_layers
  /// Classifier initialization; persists across tasks.
  Classifier theta;
  std::size_t meta_steps = 0;

  /// Meta-learned tensors in update order: extractor side, then classifier.
  std::vector<Tensor> outer() const;
  void set_outer(std::span<const Tensor> values);
  std::uint64_t outer_hash() const;
  /// Features of `x` under the current meta-learned extractor side.
  Tensor features(const Tensor& x) const;
};

/// Builds the meta state for `mode`. The extractor must be frozen; the
/// classifier is the freshly reset θ.
MetaState make_meta_state(FeatureExtractor extractor, Classifier theta, const MetaConfig& cfg);

struct MetaParamCount {
  /// Meta-learned scalars on the extractor side (SS pairs or FT weights).
  std::uint64_t extractor_side = 0;
  std::uint64_t classifier = 0;
};

MetaParamCount meta_param_count(const MetaState& state);

/// Task-local adaptation of θ on an episode's train split.
struct Adaptation {
  std::uint64_t episode = 0;
  std::uint64_t outer = 0;
  /// θ' (and adapted extractor weights first, in UpdateAll mode).
  std::vector<Tensor> adapted;
};

/// `inner_epochs` full-batch gradient-descent steps from θ on T(tr). Leaves
/// the state untouched.
Adaptation base_learn(const Dataset& dataset, const Episode& episode, const MetaState& state,
                      const MetaConfig& cfg);

struct MetaGradient {
  std::vector<Tensor> grads;  // aligned with MetaState::outer()
  double test_loss = 0.0;
};

/// Gradient of the episode-test loss of θ' with respect to the outer
/// parameters, through the unrolled inner steps unless `first_order`.
/// Throws when `adaptation` was not produced from this episode and state.
MetaGradient meta_gradient(const Dataset& dataset, const Episode& episode, const MetaState& state,
                           const Adaptation& adaptation, const MetaConfig& cfg);

/// One plain SGD step of the outer parameters with the mean of `grads`.
void apply_meta_step(MetaState& state, std::span<const MetaGradient> grads, const MetaConfig& cfg);

/// base_learn check + meta_gradient + one step.
void meta_update(const Dataset& dataset, const Episode& episode, MetaState& state, const Adaptation& adaptation,
                 const MetaConfig& cfg);

struct ClassAccuracy {
  int class_id = -1;
  double accuracy = 0.0;
};

struct TaskOutcome {
  std::uint64_t task_id = 0;
  std::uint64_t episode = 0;
  double test_loss = 0.0;
  double accuracy = 0.0;
  std::vector<ClassAccuracy> per_class;
  int hardest_class = -1;
  double hardest_accuracy = 0.0;
  std::vector<std::size_t> hardest_train_indices;
  std::vector<std::size_t> hardest_test_indices;
  bool perfect = false;
};

/// Lowest accuracy, ties to the lowest class id.
ClassAccuracy hardest(std::span<const ClassAccuracy> per_class);

/// Fills accuracy, per-class accuracies, the hardest class with its
/// episode samples and the `perfect` flag from predicted episode labels.
TaskOutcome summarize(const Episode& episode, const std::vector<int>& predicted, double test_loss);

/// Per-sample predictions of θ' on T(te) under `state`.
std::vector<int> predict_test(const Dataset& dataset, const Episode& episode, const MetaState& state,
                              const Adaptation& adaptation);

/// One meta step over the episodes of a meta-batch. Outcomes describe θ'
/// of each task under the outer parameters before the step.
std::vector<TaskOutcome> run_meta_batch(const Dataset& dataset, std::span<const Episode> episodes, MetaState& state,
                                        const MetaConfig& cfg, std::uint64_t first_task_id = 0);

/// A meta-batch of one.
TaskOutcome run_task(const Dataset& dataset, const Episode& episode, MetaState& state, const MetaConfig& cfg,
                     std::uint64_t task_id = 0);

/// base_learn then the accuracy of θ' on T(te); nothing is updated.
double evaluate_task(const Dataset& dataset, const Episode& episode, const MetaState& state, const MetaConfig& cfg);

}  // namespace metashift
