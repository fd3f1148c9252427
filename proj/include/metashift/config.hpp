#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "metashift/curriculum.hpp"
#include "metashift/dataset.hpp"
#include "metashift/meta_trainer.hpp"
#include "metashift/pretrain.hpp"

namespace metashift {

/// Invalid configuration. The message starts with "<source>:<line>: <key>"
/// whenever the offending node has a position.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSection {
  /// synth | tensor-dir | packed-binary
  std::string source = "synth";
  std::string path;
  SynthSpec synth;
  SplitMode split_mode = SplitMode::ByClass;
  /// Explicit id lists; when all are empty, `split_sizes` gives contiguous
  /// train/val/test ranges.
  std::vector<int> train, val, test;
  std::vector<std::size_t> split_sizes{4, 2, 2};
};

struct ModelSection {
  /// mlp | conv
  std::string arch = "mlp";
  std::size_t hidden = 32;
  std::size_t features = 16;
  std::vector<std::size_t> filters{8, 16};
  std::size_t kernel = 3;
  double slope = 0.1;
};

struct MetaSection {
  MetaConfig config;
  std::size_t tasks = 500;
  std::size_t val_every = 50;
  std::size_t val_tasks = 50;
  /// Hidden widths of θ; empty means a single linear layer.
  std::vector<std::size_t> classifier_hidden;
};

struct EvalSection {
  std::size_t tasks = 600;
  TaskShape shape;
};

struct AblateSection {
  std::vector<MetaMode> modes{MetaMode::SS, MetaMode::FTFull, MetaMode::FTBlock, MetaMode::FTClassifier,
                              MetaMode::UpdateTheta, MetaMode::UpdateAll};
};

/// Everything one experiment run needs. `seed` drives initialization,
/// pretraining batches, task sampling and evaluation; the synthetic dataset
/// has its own seed so the data stays fixed when `seed` varies.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  DatasetSection dataset;
  ModelSection model;
  PretrainConfig pretrain;
  MetaSection meta;
  HTConfig ht;
  EvalSection eval;
  AblateSection ablate;

  /// Semantic checks across sections; throws ConfigError.
  void validate() const;
  ScheduleConfig schedule() const;
};

/// Parses YAML text. `overrides` are "dotted.key=value" strings applied
/// before validation; values are parsed as YAML. Unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text, const std::string& source,
                              const std::vector<std::string>& overrides = {});
/// Throws ConfigError("config not found: ...") for a missing file.
ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});

/// Every field, in a form parse_config reads back to an equal config.
std::string dump_config(const ExperimentConfig& cfg);

}  // namespace metashift
