#include "metashift/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metashift {

ConfidenceInterval confidence_interval(std::span<const double> values) {
  if (values.size() < 2) throw std::invalid_argument("confidence_interval: needs at least 2 values");
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) return {values[0], 0.0};
  const double n = double(values.size());
  double total = 0.0;
  for (auto v : values) total += v;
  const double mean = total / n;
  double sq = 0.0;
  for (auto v : values) sq += (v - mean) * (v - mean);
  const double s = std::sqrt(sq / (n - 1.0));
  return {mean, 1.96 * s / std::sqrt(n)};
}

nlohmann::json EvalReport::to_json() const {
  return {{"mode", mode},
          {"tasks", tasks},
          {"way", shape.way},
          {"k_train", shape.k_train},
          {"k_test", shape.k_test},
          {"mean", mean},
          {"half_width", half_width},
          {"accuracies", accuracies}};
}

EvalReport meta_test(const Dataset& dataset, const std::vector<int>& classes, const MetaState& state,
                     const MetaConfig& cfg, std::size_t n_tasks, const TaskShape& shape, std::uint64_t seed) {
  if (n_tasks < 2) throw std::invalid_argument("meta_test: needs at least 2 tasks");
  MetaConfig task_cfg = cfg;
  task_cfg.task = shape;
  Rng rng(seed);
  EvalReport report;
  report.shape = shape;
  report.mode = to_string(state.mode);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Episode ep = sample_episode(dataset, classes, shape.way, shape.k_train, shape.k_test, rng);
    report.accuracies.push_back(evaluate_task(dataset, ep, state, task_cfg));
  }
  report.tasks = report.accuracies.size();
  const auto ci = confidence_interval(report.accuracies);
  report.mean = ci.mean;
  report.half_width = ci.half_width;
  return report;
}

}  // namespace metashift
