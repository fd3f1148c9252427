#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "metashift/meta_trainer.hpp"

namespace metashift {

struct ConfidenceInterval {
  double mean = 0.0;
  double half_width = 0.0;
};

/// mean +- 1.96 * s / sqrt(n) with s the sample standard deviation. Needs
/// at least two values.
ConfidenceInterval confidence_interval(std::span<const double> values);

struct EvalReport {
  std::vector<double> accuracies;
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t tasks = 0;
  TaskShape shape;
  std::string mode;

  nlohmann::json to_json() const;
};

/// Adapts θ on `n_tasks` unseen episodes with the meta parameters fixed and
/// reports the accuracy of each θ' on its test split.
EvalReport meta_test(const Dataset& dataset, const std::vector<int>& classes, const MetaState& state,
                     const MetaConfig& cfg, std::size_t n_tasks, const TaskShape& shape, std::uint64_t seed);

}  // namespace metashift
