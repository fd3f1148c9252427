#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "metashift/config.hpp"
#include "metashift/evaluation.hpp"
#include "metashift/store.hpp"

namespace metashift {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadedData {
  Dataset data;
  SplitSpec split;
  std::vector<int> train, val, test;
};

/// Builds or loads the dataset and resolves the split. Every class must
/// hold enough samples for both the meta-train and the evaluation shape.
LoadedData load_data(const ExperimentConfig& cfg);

Arch make_arch(const ExperimentConfig& cfg, const Shape& sample_shape);

/// Files of one output directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path resolved_config() const { return root / "resolved_config.yaml"; }
  std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
  std::filesystem::path pretrain_checkpoint() const { return root / "pretrain.ckpt"; }
  std::filesystem::path meta_checkpoint() const { return root / "meta.ckpt"; }
  std::filesystem::path curve() const { return root / "curve.dat"; }
  std::filesystem::path trace() const { return root / "trace.dat"; }
  std::filesystem::path eval_report() const { return root / "eval.json"; }
  std::filesystem::path ablation_table() const { return root / "ablation.txt"; }
  std::filesystem::path ablation_dir() const { return root / "ablate"; }
  std::filesystem::path plot_dir() const { return root / "plot"; }
};

struct AblationRow {
  MetaMode mode = MetaMode::SS;
  MetaParamCount params;
  std::size_t meta_steps = 0;
  EvalReport report;
  std::uint64_t pretrain_hash = 0;
};

/// Runs pipeline stages against one output directory. Every stage writes
/// the resolved config next to its outputs and appends to the metrics log.
class Experiment {
 public:
  using Notify = std::function<void(const std::string&)>;

  Experiment(ExperimentConfig cfg, Notify info = {}, Notify debug = {});

  const ExperimentConfig& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }

  PretrainResult pretrain();
  /// Needs the pretrain checkpoint of the same output directory.
  ScheduleResult meta_train();
  /// Evaluates the meta-train checkpoint. With `allow_no_meta`, a missing
  /// meta checkpoint falls back to the pretrained extractor with fresh
  /// meta parameters; a pretrain-only checkpoint is refused otherwise.
  EvalReport meta_test(bool allow_no_meta);
  /// Meta-trains and evaluates every mode of `ablate.modes` from a single
  /// pretrain checkpoint, reusing an existing one.
  std::vector<AblationRow> ablate();
  /// Column files derived from the metrics log and, when present, the SS
  /// parameters of the meta checkpoint. Returns the files written.
  std::vector<std::filesystem::path> plot_data();

 private:
  void prepare();
  const LoadedData& data();
  FeatureExtractor pretrained_extractor(std::uint64_t* hash) const;
  MetaState fresh_state(FeatureExtractor extractor, const MetaConfig& meta) const;
  MetaConfig eval_config(const MetaConfig& meta) const;
  void say(const std::string& msg) const;
  void say_debug(const std::string& msg) const;

  ExperimentConfig cfg_;
  RunPaths paths_;
  Notify info_, debug_;
  std::optional<LoadedData> data_;
};

/// "mean +- half_width" rows, one per mode, with aligned columns.
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace metashift
