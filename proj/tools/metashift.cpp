// Experiment CLI: pretrain, meta-train, meta-test, ablate and plot-data
// against one output directory.

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "metashift/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> set;
  bool allow_no_meta = false;
};

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("metashift");
  logger->set_pattern("[%H:%M:%S] %^%l%$ %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("METASHIFT_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("METASHIFT_LOG={} is not one of error|info|debug; using info", level);
  }
}

void add_common(CLI::App* cmd, Options& opt, bool config_required) {
  auto* config = cmd->add_option("--config", opt.config, "Experiment config (YAML)");
  if (config_required) config->required();
  config->check(CLI::ExistingFile);
  cmd->add_option("--seed", opt.seed, "Override the experiment seed");
  cmd->add_option("--out", opt.out, "Override the output directory");
  cmd->add_option("--set", opt.set, "Override one config key, key=value (repeatable)")->take_all();
}

metashift::ExperimentConfig resolve(const Options& opt) {
  std::vector<std::string> overrides = opt.set;
  if (opt.seed) overrides.push_back("seed=" + std::to_string(*opt.seed));
  if (!opt.out.empty()) overrides.push_back("output_dir=" + opt.out);
  if (opt.config.empty()) return metashift::parse_config("", "<defaults>", overrides);
  return metashift::load_config(opt.config, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-transfer learning experiments with scaling/shifting and a hard-task curriculum"};
  app.require_subcommand(1);
  Options opt;
  auto* pretrain = app.add_subcommand("pretrain", "Train the extractor on all meta-train classes and freeze it");
  auto* meta_train = app.add_subcommand("meta-train", "Meta-train from the pretrain checkpoint");
  auto* meta_test = app.add_subcommand("meta-test", "Evaluate on unseen tasks and report a 95% interval");
  auto* ablate = app.add_subcommand("ablate", "Meta-train and evaluate every mode of ablate.modes");
  auto* plot = app.add_subcommand("plot-data", "Write column files for plotting from the metrics log");
  for (auto* cmd : {pretrain, meta_train, meta_test, ablate}) add_common(cmd, opt, true);
  add_common(plot, opt, false);
  meta_test->add_flag("--allow-no-meta", opt.allow_no_meta, "Evaluate a pretrain-only model");

  CLI11_PARSE(app, argc, argv);
  configure_logging();

  metashift::ExperimentConfig cfg;
  try {
    if (plot->parsed() && opt.config.empty() && opt.out.empty()) {
      spdlog::error("plot-data needs --config or --out");
      return 2;
    }
    cfg = resolve(opt);
  } catch (const metashift::ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  }

  try {
    metashift::Experiment exp(
        cfg, [](const std::string& m) { spdlog::info("{}", m); }, [](const std::string& m) { spdlog::debug("{}", m); });
    spdlog::debug("output directory {}", exp.paths().root.string());
    if (pretrain->parsed()) {
      exp.pretrain();
    } else if (meta_train->parsed()) {
      exp.meta_train();
    } else if (meta_test->parsed()) {
      exp.meta_test(opt.allow_no_meta);
    } else if (ablate->parsed()) {
      const auto rows = exp.ablate();
      std::fputs(metashift::format_ablation(rows).c_str(), stdout);
    } else if (plot->parsed()) {
      for (const auto& file : exp.plot_data()) spdlog::info("wrote {}", file.string());
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
