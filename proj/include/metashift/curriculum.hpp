#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "metashift/episode.hpp"
#include "metashift/meta_trainer.hpp"
#include "metashift/metrics.hpp"

namespace metashift {

struct HTConfig {
  bool enabled = true;
  /// Random meta-batches between hard phases.
  std::size_t window = 10;
  std::size_t hard_tasks = 10;
  HardMethod method = HardMethod::Resample;

  void validate() const;
};

/// Failure classes harvested since the last hard phase. Duplicates are kept
/// and weight later sampling.
class FailurePool {
 public:
  void harvest(const TaskOutcome& outcome);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t distinct_classes() const;
  const std::vector<FailureEntry>& entries() const { return entries_; }

 private:
  std::vector<FailureEntry> entries_;
};

struct ScheduleConfig {
  /// Random meta-batch tasks; hard tasks come on top.
  std::size_t total_tasks = 500;
  /// Tasks between validation evaluations; 0 evaluates only at start and end.
  std::size_t val_every = 50;
  std::size_t val_tasks = 50;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TracePoint {
  /// Tasks trained on so far, random and hard.
  std::size_t iteration = 0;
  std::size_t meta_steps = 0;
  double accuracy = 0.0;
  double half_width = 0.0;

  friend bool operator==(const TracePoint&, const TracePoint&) = default;
};

struct HardPhaseReport {
  std::size_t index = 0;
  std::size_t at_iteration = 0;
  std::size_t pool_size = 0;
  std::size_t pool_classes = 0;
  bool skipped = false;
  std::vector<std::vector<int>> classes;
  std::vector<std::vector<ClassSource>> provenance;
  std::vector<std::string> notices;
  std::vector<TaskOutcome> outcomes;
};

struct ScheduleResult {
  std::vector<TracePoint> trace;
  std::vector<HardPhaseReport> phases;
  std::vector<TaskOutcome> outcomes;  // random-batch tasks, in order
  std::size_t iterations = 0;
  std::size_t random_tasks = 0;
  std::size_t hard_tasks = 0;
};

/// Samples `ht.hard_tasks` episodes from the pool, trains on them in
/// meta-batches and empties the pool. Outcomes are reported, not harvested.
HardPhaseReport hard_phase(const Dataset& dataset, const std::vector<int>& classes, FailurePool& pool,
                           MetaState& state, const MetaConfig& cfg, const HTConfig& ht, Rng& rng,
                           std::uint64_t first_task_id);

/// Random meta-batches with a hard phase after every `ht.window` of them,
/// until `total_tasks` random tasks are spent. Validation accuracy on
/// `val_classes` uses the same episodes at every evaluation.
ScheduleResult schedule(const Dataset& dataset, const std::vector<int>& train_classes,
                        const std::vector<int>& val_classes, MetaState& state, const MetaConfig& cfg,
                        const HTConfig& ht, const ScheduleConfig& sc, MetricsLog* log = nullptr);

/// Reference loop of random meta-batches only, sharing the sampling and
/// validation streams of `schedule`.
ScheduleResult conventional_schedule(const Dataset& dataset, const std::vector<int>& train_classes,
                                     const std::vector<int>& val_classes, MetaState& state, const MetaConfig& cfg,
                                     const ScheduleConfig& sc, MetricsLog* log = nullptr);

/// First trace iteration whose accuracy reaches `target`, or -1.
long first_iteration_reaching(const std::vector<TracePoint>& trace, double target);

}  // namespace metashift
