#include "metashift/curriculum.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "metashift/evaluation.hpp"

namespace metashift {

namespace {

constexpr std::uint64_t kHardStream = 0x48415244ULL;
constexpr std::uint64_t kValStream = 0x56414C49ULL;

// Shared machinery of both schedulers: the random-task stream, the fixed
// validation episodes, the trace and the metrics log.
class Runner {
 public:
  Runner(const Dataset& dataset, const std::vector<int>& train_classes, const std::vector<int>& val_classes,
         MetaState& state, const MetaConfig& cfg, const ScheduleConfig& sc, MetricsLog* log)
      : dataset_(dataset), train_(train_classes), state_(state), cfg_(cfg), sc_(sc), log_(log), random_(sc.seed) {
    cfg.validate();
    sc.validate();
    Rng val_rng(sc.seed ^ kValStream);
    for (std::size_t t = 0; t < sc.val_tasks; ++t) {
      val_.push_back(sample_episode(dataset, val_classes, cfg.task.way, cfg.task.k_train, cfg.task.k_test, val_rng));
    }
    next_val_ = sc.val_every;
  }

  bool budget_left() const { return result.random_tasks < sc_.total_tasks; }

  std::vector<TaskOutcome> random_batch() {
    const std::size_t n = std::min(cfg_.meta_batch, sc_.total_tasks - result.random_tasks);
    std::vector<Episode> eps;
    for (std::size_t i = 0; i < n; ++i) {
      eps.push_back(sample_episode(dataset_, train_, cfg_.task.way, cfg_.task.k_train, cfg_.task.k_test, random_));
    }
    auto outcomes = run_meta_batch(dataset_, eps, state_, cfg_, result.iterations);
    result.random_tasks += n;
    advance(outcomes, "random");
    for (const auto& o : outcomes) result.outcomes.push_back(o);
    return outcomes;
  }

  void advance(const std::vector<TaskOutcome>& outcomes, const char* kind) {
    result.iterations += outcomes.size();
    if (log_) {
      for (const auto& o : outcomes) {
        log_->write("meta-train", o.task_id,
                    {{"kind", kind},
                     {"loss", o.test_loss},
                     {"accuracy", o.accuracy},
                     {"hardest_class", o.hardest_class},
                     {"perfect", o.perfect}});
      }
    }
  }

  void maybe_validate() {
    if (sc_.val_every == 0 || result.iterations < next_val_) return;
    while (next_val_ <= result.iterations) next_val_ += sc_.val_every;
    validate_now();
  }

  void validate_now() {
    if (val_.empty()) return;
    std::vector<double> acc;
    for (const auto& ep : val_) acc.push_back(evaluate_task(dataset_, ep, state_, cfg_));
    TracePoint p{result.iterations, state_.meta_steps, 0.0, 0.0};
    if (acc.size() >= 2) {
      const auto ci = confidence_interval(acc);
      p.accuracy = ci.mean;
      p.half_width = ci.half_width;
    } else {
      p.accuracy = acc[0];
    }
    result.trace.push_back(p);
    if (log_) {
      log_->write("validation", p.iteration,
                  {{"accuracy", p.accuracy}, {"half_width", p.half_width}, {"meta_steps", p.meta_steps}});
    }
  }

  void finish() {
    if (result.trace.empty() || result.trace.back().iteration != result.iterations) validate_now();
  }

  ScheduleResult result;

 private:
  const Dataset& dataset_;
  const std::vector<int>& train_;
  MetaState& state_;
  const MetaConfig& cfg_;
  const ScheduleConfig& sc_;
  MetricsLog* log_;
  Rng random_;
  std::vector<Episode> val_;
  std::size_t next_val_ = 0;
};

}  // namespace

void HTConfig::validate() const {
  if (window < 1) throw std::invalid_argument("ht: window must be >= 1");
}

void ScheduleConfig::validate() const {
  if (total_tasks < 1) throw std::invalid_argument("schedule: total_tasks must be >= 1");
}

void FailurePool::harvest(const TaskOutcome& outcome) {
  entries_.push_back(
      FailureEntry{outcome.hardest_class, outcome.hardest_train_indices, outcome.hardest_test_indices, outcome.task_id});
}

std::size_t FailurePool::distinct_classes() const {
  std::set<int> ids;
  for (const auto& e : entries_) ids.insert(e.class_id);
  return ids.size();
}

HardPhaseReport hard_phase(const Dataset& dataset, const std::vector<int>& classes, FailurePool& pool,
                           MetaState& state, const MetaConfig& cfg, const HTConfig& ht, Rng& rng,
                           std::uint64_t first_task_id) {
  HardPhaseReport report;
  report.pool_size = pool.size();
  report.pool_classes = pool.distinct_classes();
  if (pool.empty()) {
    report.skipped = true;
    report.notices.push_back("failure pool is empty; hard phase skipped");
    return report;
  }
  std::vector<Episode> episodes;
  for (std::size_t t = 0; t < ht.hard_tasks; ++t) {
    episodes.push_back(sample_hard_episode(dataset, classes, pool.entries(), cfg.task.way, cfg.task.k_train,
                                           cfg.task.k_test, ht.method, rng, &report.notices));
    report.classes.push_back(episodes.back().class_map);
    report.provenance.push_back(episodes.back().provenance);
  }
  pool.clear();
  for (std::size_t b = 0; b < episodes.size(); b += cfg.meta_batch) {
    const std::size_t n = std::min(cfg.meta_batch, episodes.size() - b);
    auto outcomes = run_meta_batch(dataset, std::span<const Episode>(episodes).subspan(b, n), state, cfg,
                                   first_task_id + b);
    report.outcomes.insert(report.outcomes.end(), outcomes.begin(), outcomes.end());
  }
  return report;
}

ScheduleResult schedule(const Dataset& dataset, const std::vector<int>& train_classes,
                        const std::vector<int>& val_classes, MetaState& state, const MetaConfig& cfg,
                        const HTConfig& ht, const ScheduleConfig& sc, MetricsLog* log) {
  ht.validate();
  Runner run(dataset, train_classes, val_classes, state, cfg, sc, log);
  if (skips_meta_training(state.mode)) {
    run.finish();
    return std::move(run.result);
  }
  Rng hard_rng(sc.seed ^ kHardStream);
  FailurePool pool;
  std::size_t batches = 0;
  run.validate_now();
  while (run.budget_left()) {
    for (const auto& o : run.random_batch()) pool.harvest(o);
    run.maybe_validate();
    if (++batches < ht.window) continue;
    batches = 0;
    if (ht.enabled) {
      HardPhaseReport report =
          hard_phase(dataset, train_classes, pool, state, cfg, ht, hard_rng, run.result.iterations);
      report.index = run.result.phases.size();
      report.at_iteration = run.result.iterations;
      run.result.hard_tasks += report.outcomes.size();
      run.advance(report.outcomes, "hard");
      if (log) {
        log->write("hard-phase", report.at_iteration,
                   {{"index", report.index},
                    {"pool_size", report.pool_size},
                    {"pool_classes", report.pool_classes},
                    {"tasks", report.outcomes.size()},
                    {"skipped", report.skipped},
                    {"notices", report.notices}});
      }
      run.result.phases.push_back(std::move(report));
      run.maybe_validate();
    }
    pool.clear();
  }
  run.finish();
  return std::move(run.result);
}

ScheduleResult conventional_schedule(const Dataset& dataset, const std::vector<int>& train_classes,
                                     const std::vector<int>& val_classes, MetaState& state, const MetaConfig& cfg,
                                     const ScheduleConfig& sc, MetricsLog* log) {
  Runner run(dataset, train_classes, val_classes, state, cfg, sc, log);
  if (skips_meta_training(state.mode)) {
    run.finish();
    return std::move(run.result);
  }
  run.validate_now();
  while (run.budget_left()) {
    run.random_batch();
    run.maybe_validate();
  }
  run.finish();
  return std::move(run.result);
}

long first_iteration_reaching(const std::vector<TracePoint>& trace, double target) {
  for (const auto& p : trace) {
    if (p.accuracy >= target) return static_cast<long>(p.iteration);
  }
  return -1;
}

}  // namespace metashift
