#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "metashift/curriculum.hpp"
#include "metashift/evaluation.hpp"

using namespace metashift;

namespace {

struct Bench {
  Dataset data;
  std::vector<int> train, val, test;
  FeatureExtractor extractor;

  static Bench make(std::uint64_t seed) {
    Dataset d = synth_generate({.classes = 20, .per_class = 20, .sample_shape = {6}, .noise = 0.4, .seed = seed});
    std::vector<int> train(10), val{10, 11, 12, 13, 14}, test{15, 16, 17, 18, 19};
    std::iota(train.begin(), train.end(), 0);
    Rng rng(seed);
    FeatureExtractor e(Arch::mlp(6, 8, 5), rng);
    e.freeze();
    return Bench{std::move(d), train, val, test, std::move(e)};
  }

  MetaState state(const MetaConfig& cfg) const {
    Rng rng(99);
    return make_meta_state(extractor, init_classifier(5, cfg.task.way, rng), cfg);
  }
};

MetaConfig quick() {
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  cfg.inner_epochs = 2;
  cfg.meta_rate = {0.01, 0.001, 1000};
  cfg.meta_batch = 2;
  cfg.task = {5, 1, 3};
  return cfg;
}

TaskOutcome outcome_for(int cls, std::uint64_t id) {
  TaskOutcome o;
  o.hardest_class = cls;
  o.task_id = id;
  o.hardest_train_indices = {std::size_t(cls) * 20};
  return o;
}

}  // namespace

TEST_CASE("failure pool counting") {
  FailurePool pool;
  for (std::uint64_t t = 0; t < 20; ++t) pool.harvest(outcome_for(int(t % 7), t));
  CHECK(pool.size() == 20);
  FailurePool repeats;
  for (std::uint64_t t = 0; t < 3; ++t) repeats.harvest(outcome_for(4, t));
  CHECK(repeats.size() == 3);
  CHECK(repeats.distinct_classes() == 1);
  pool.clear();
  CHECK(pool.size() == 0);
}

TEST_CASE("hard phase") {
  auto b = Bench::make(1);
  auto cfg = quick();
  HTConfig ht;
  ht.hard_tasks = 4;
  SUBCASE("trains on pool-conditioned tasks and empties the pool") {
    MetaState s = b.state(cfg);
    FailurePool pool;
    pool.harvest(outcome_for(2, 0));
    pool.harvest(outcome_for(7, 1));
    Rng rng(3);
    auto report = hard_phase(b.data, b.train, pool, s, cfg, ht, rng, 100);
    CHECK(pool.empty());
    CHECK(report.outcomes.size() == 4);
    CHECK(s.meta_steps == 2);
    REQUIRE(report.provenance.size() == 4);
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(std::count(report.provenance[t].begin(), report.provenance[t].end(), ClassSource::FailurePool) == 2);
      CHECK(std::count(report.provenance[t].begin(), report.provenance[t].end(), ClassSource::Padding) == 3);
      std::set<int> used(report.classes[t].begin(), report.classes[t].end());
      CHECK(used.count(2) == 1);
      CHECK(used.count(7) == 1);
    }
  }
  SUBCASE("zero hard tasks only empties the pool") {
    MetaState s = b.state(cfg);
    FailurePool pool;
    pool.harvest(outcome_for(2, 0));
    ht.hard_tasks = 0;
    Rng rng(3);
    auto report = hard_phase(b.data, b.train, pool, s, cfg, ht, rng, 0);
    CHECK(pool.empty());
    CHECK(report.outcomes.empty());
    CHECK(s.meta_steps == 0);
  }
  SUBCASE("empty pool skips with a notice") {
    MetaState s = b.state(cfg);
    FailurePool pool;
    Rng rng(3);
    auto report = hard_phase(b.data, b.train, pool, s, cfg, ht, rng, 0);
    CHECK(report.skipped);
    CHECK(report.notices.size() == 1);
  }
}

TEST_CASE("schedule arithmetic and trace") {
  auto b = Bench::make(2);
  auto cfg = quick();
  HTConfig ht;
  ht.hard_tasks = 3;
  ScheduleConfig sc{.total_tasks = 40, .val_every = 10, .val_tasks = 4, .seed = 5};
  MetaState s = b.state(cfg);
  MetricsLog log;
  auto r = schedule(b.data, b.train, b.val, s, cfg, ht, sc, &log);
  CHECK(r.phases.size() == 2);
  CHECK(r.random_tasks == 40);
  CHECK(r.hard_tasks == 6);
  CHECK(r.iterations == 46);
  CHECK(s.meta_steps == 20 + 2 * 2);
  CHECK(r.trace.front().iteration == 0);
  CHECK(r.trace.back().iteration == 46);
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i].iteration > r.trace[i - 1].iteration);
  CHECK(r.trace.size() >= 5);
  for (const auto& phase : r.phases) CHECK(phase.pool_size == 20);
  CHECK(log.records() > 46);
}

TEST_CASE("disabled HT reproduces the conventional scheduler bit for bit") {
  auto b = Bench::make(3);
  auto cfg = quick();
  ScheduleConfig sc{.total_tasks = 30, .val_every = 6, .val_tasks = 4, .seed = 8};
  HTConfig off;
  off.enabled = false;
  off.window = 3;
  MetaState a = b.state(cfg);
  MetaState c = b.state(cfg);
  auto with_scheduler = schedule(b.data, b.train, b.val, a, cfg, off, sc);
  auto plain = conventional_schedule(b.data, b.train, b.val, c, cfg, sc);
  CHECK(with_scheduler.trace == plain.trace);
  CHECK(a.outer_hash() == c.outer_hash());
  CHECK(with_scheduler.phases.empty());
}

TEST_CASE("HT on and off agree until the first hard phase") {
  auto b = Bench::make(4);
  auto cfg = quick();
  ScheduleConfig sc{.total_tasks = 24, .val_every = 4, .val_tasks = 4, .seed = 9};
  HTConfig on;
  on.window = 4;
  on.hard_tasks = 2;
  HTConfig off = on;
  off.enabled = false;
  MetaState a = b.state(cfg);
  MetaState c = b.state(cfg);
  auto ht = schedule(b.data, b.train, b.val, a, cfg, on, sc);
  auto plain = schedule(b.data, b.train, b.val, c, cfg, off, sc);
  const std::size_t first_phase = ht.phases.at(0).at_iteration;
  CHECK(first_phase == 8);
  for (std::size_t i = 0; i < std::min(ht.trace.size(), plain.trace.size()); ++i) {
    if (ht.trace[i].iteration <= first_phase - 2) CHECK(ht.trace[i] == plain.trace[i]);
  }
  CHECK(ht.iterations == plain.iterations + ht.hard_tasks);
  CHECK(ht.hard_tasks == 6);
  CHECK(a.meta_steps == c.meta_steps + 3);
  CHECK(a.outer_hash() != c.outer_hash());
}

TEST_CASE("modes without meta-training leave the schedule empty") {
  auto b = Bench::make(5);
  auto cfg = quick();
  cfg.mode = MetaMode::UpdateTheta;
  MetaState s = b.state(cfg);
  auto r = schedule(b.data, b.train, b.val, s, cfg, HTConfig{}, ScheduleConfig{.total_tasks = 10, .val_tasks = 3});
  CHECK(r.iterations == 0);
  CHECK(s.meta_steps == 0);
  CHECK(r.trace.size() == 1);
}

TEST_CASE("confidence interval") {
  auto same = confidence_interval(std::vector<double>{0.5, 0.5, 0.5});
  CHECK(same.mean == 0.5);
  CHECK(same.half_width == 0.0);
  auto two = confidence_interval(std::vector<double>{0.0, 1.0});
  CHECK(two.mean == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(two.half_width == doctest::Approx(0.98).epsilon(1e-9));
  CHECK_THROWS_AS(confidence_interval(std::vector<double>{0.3}), std::invalid_argument);
}

TEST_CASE("meta-test reports and mutates nothing") {
  auto b = Bench::make(6);
  auto cfg = quick();
  MetaState s = b.state(cfg);
  const auto before = s.outer_hash();
  const auto ext = s.extractor.weight_hash();
  auto report = meta_test(b.data, b.test, s, cfg, 30, {5, 1, 3}, 11);
  CHECK(report.tasks == 30);
  CHECK(report.accuracies.size() == 30);
  CHECK((report.mean >= 0.0 && report.mean <= 1.0));
  CHECK(report.half_width >= 0.0);
  CHECK(s.outer_hash() == before);
  CHECK(s.extractor.weight_hash() == ext);
  CHECK(report.to_json()["way"] == 5);
  for (auto a : report.accuracies) CHECK(std::fabs(a * 15.0 - std::round(a * 15.0)) < 1e-9);
}

TEST_CASE("task accuracy equals a brute-force recount") {
  auto b = Bench::make(7);
  auto cfg = quick();
  MetaState s = b.state(cfg);
  Rng rng(12);
  for (int t = 0; t < 10; ++t) {
    Episode ep = sample_episode(b.data, b.test, 5, 1, 4, rng);
    auto task_cfg = cfg;
    task_cfg.task = {5, 1, 4};
    Adaptation a = base_learn(b.data, ep, s, task_cfg);
    auto predicted = predict_test(b.data, ep, s, a);
    int correct = 0;
    for (std::size_t i = 0; i < ep.test_indices.size(); ++i) {
      const int truth = b.data.label(ep.test_indices[i]);
      correct += ep.class_map[std::size_t(predicted[i])] == truth;
    }
    CHECK(evaluate_task(b.data, ep, s, task_cfg) == double(correct) / 20.0);
  }
}

TEST_CASE("fewer test samples per class widen the interval") {
  auto b = Bench::make(8);
  auto cfg = quick();
  MetaState s = b.state(cfg);
  auto narrow = meta_test(b.data, b.test, s, cfg, 60, {5, 1, 15}, 21);
  auto wide = meta_test(b.data, b.test, s, cfg, 60, {5, 1, 1}, 21);
  CHECK(wide.half_width > narrow.half_width);
}
