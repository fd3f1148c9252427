#pragma once

// The synthetic super-class benchmark shared by the acceptance criteria:
// 100 vector classes in 20 super-classes of 5, split 12/4/4 by super-class,
// a pretrained MLP extractor and 5-way 1-shot tasks.

#include <cstdint>

#include "metashift/curriculum.hpp"
#include "metashift/evaluation.hpp"
#include "metashift/pretrain.hpp"

namespace metashift::testing {

struct Benchmark {
  static constexpr std::size_t kDims = 16;
  static constexpr std::size_t kHidden = 32;
  static constexpr std::size_t kFeatures = 16;

  std::uint64_t seed = 0;
  Dataset data;
  SplitSpec split;
  std::vector<int> train, val, test;

  static SynthSpec synth(std::uint64_t seed) {
    return {.classes = 100,
            .per_class = 20,
            .sample_shape = {kDims},
            .noise = 0.5,
            .superclasses = 20,
            .superclass_share = 0.6,
            .seed = seed};
  }

  static Benchmark make(std::uint64_t seed) {
    Dataset d = synth_generate(synth(seed));
    SplitSpec split = contiguous_split(SplitMode::BySuperclass, 12, 4, 4);
    validate_split(split, d);
    auto train = partition_classes(d, split, Partition::Train);
    auto val = partition_classes(d, split, Partition::Val);
    auto test = partition_classes(d, split, Partition::Test);
    return Benchmark{seed, std::move(d), split, std::move(train), std::move(val), std::move(test)};
  }

  FeatureExtractor pretrained() const {
    Rng rng(seed);
    FeatureExtractor e(Arch::mlp(kDims, kHidden, kFeatures), rng);
    PretrainConfig cfg;
    cfg.rate = {0.05, 0.005, 200};
    cfg.seed = seed;
    return pretrain(data, train, std::move(e), init_classifier(kFeatures, train.size(), rng), cfg).extractor;
  }

  static MetaConfig meta(MetaMode mode) {
    MetaConfig cfg;
    cfg.mode = mode;
    cfg.inner_lr = 0.01;
    cfg.inner_epochs = 20;
    cfg.meta_rate = {0.01, 0.001, 1000};
    cfg.meta_batch = 2;
    cfg.task = {5, 1, 15};
    return cfg;
  }

  MetaState state(const FeatureExtractor& extractor, const MetaConfig& cfg) const {
    Rng rng(1000 + seed);
    return make_meta_state(extractor, init_classifier(kFeatures, cfg.task.way, rng), cfg);
  }

  ScheduleConfig schedule_config(std::size_t val_every, std::size_t val_tasks) const {
    return {.total_tasks = 500, .val_every = val_every, .val_tasks = val_tasks, .seed = seed};
  }

  EvalReport evaluate(const MetaState& s, const MetaConfig& cfg) const {
    return meta_test(data, test, s, cfg, 200, cfg.task, 77 + seed);
  }
};

}  // namespace metashift::testing
