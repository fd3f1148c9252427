#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metashift/dataset.hpp"
#include "metashift/rng.hpp"

namespace metashift {

enum class ClassSource { Random, FailurePool, Padding };

/// One N-way task: a train split for the base-learner and a test split for
/// the meta-learner. Labels inside the episode are 0..way-1; `class_map`
/// translates them back to dataset class ids.
struct Episode {
  std::size_t way = 0;
  std::size_t k_train = 0;
  std::size_t k_test = 0;
  std::vector<int> class_map;
  std::vector<ClassSource> provenance;
  std::vector<std::size_t> train_indices;
  std::vector<int> train_labels;
  std::vector<std::size_t> test_indices;
  std::vector<int> test_labels;

  /// Identity of the episode's content, used to pair adaptations with the
  /// episode they came from.
  std::uint64_t fingerprint() const;
};

/// Draws `way` classes from `classes` and disjoint train/test samples for
/// each, all without replacement.
Episode sample_episode(const Dataset& dataset, std::span<const int> classes, std::size_t way, std::size_t k_train,
                       std::size_t k_test, Rng& rng);

/// A failure class harvested from one task, with the samples it was seen on.
struct FailureEntry {
  int class_id = -1;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::uint64_t source_task = 0;
};

enum class HardMethod { Reuse, Resample };

HardMethod parse_hard_method(const std::string& name);
std::string to_string(HardMethod method);

/// Samples a task conditioned on the failure pool. Pool classes are chosen
/// first, weighted by how many times they appear; missing slots are padded
/// with random classes from `classes`. Under Reuse, a pool class's train
/// split comes from its recorded failure-time samples; the test split is
/// always drawn fresh. Fallbacks from Reuse to Resample are appended to
/// `notices` when given.
Episode sample_hard_episode(const Dataset& dataset, std::span<const int> classes, std::span<const FailureEntry> pool,
                            std::size_t way, std::size_t k_train, std::size_t k_test, HardMethod method, Rng& rng,
                            std::vector<std::string>* notices = nullptr);

}  // namespace metashift
