#include "metashift/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

namespace metashift {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kThetaStream = 0x54484554ULL;
constexpr std::uint64_t kEvalStream = 0x4556414CULL;

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw ExperimentError("cannot write " + file.string());
  out << text;
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string file_stem(MetaMode mode) { return to_string(mode); }

// Records of one phase since the latest start of the stage that owns it.
struct LogSlices {
  std::map<std::string, std::vector<nlohmann::json>> by_phase;

  static LogSlices read(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ExperimentError("metrics log not found: " + file.string());
    static const std::map<std::string, std::vector<std::string>> owned{
        {"pretrain", {"pretrain"}},
        {"meta-train", {"meta-train", "validation", "hard-phase"}},
        {"meta-test", {"meta-test"}}};
    LogSlices s;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ExperimentError(file.string() + ":" + std::to_string(number) + ": " + e.what());
      }
      const std::string phase = rec.value("phase", "");
      if (phase == "run") {
        auto it = owned.find(rec.value("stage", ""));
        if (it != owned.end()) {
          for (const auto& p : it->second) s.by_phase[p].clear();
        }
        continue;
      }
      s.by_phase[phase].push_back(std::move(rec));
    }
    return s;
  }

  const std::vector<nlohmann::json>& phase(const std::string& name) const {
    static const std::vector<nlohmann::json> none;
    auto it = by_phase.find(name);
    return it == by_phase.end() ? none : it->second;
  }
};

}  // namespace

LoadedData load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  std::optional<Dataset> data;
  const std::size_t need = std::max(cfg.meta.config.task.k_train + cfg.meta.config.task.k_test,
                                    cfg.eval.shape.k_train + cfg.eval.shape.k_test);
  if (d.source == "synth") {
    data = synth_generate(d.synth);
    data->require_min_samples(need);
  } else {
    data = load_dataset(d.path, parse_dataset_format(d.source), need);
  }
  SplitSpec split;
  if (d.train.empty() && d.val.empty() && d.test.empty()) {
    split = contiguous_split(d.split_mode, d.split_sizes.at(0), d.split_sizes.at(1), d.split_sizes.at(2));
  } else {
    split = SplitSpec{d.split_mode, d.train, d.val, d.test};
  }
  validate_split(split, *data);
  auto train = partition_classes(*data, split, Partition::Train);
  auto val = partition_classes(*data, split, Partition::Val);
  auto test = partition_classes(*data, split, Partition::Test);
  const std::size_t way = cfg.meta.config.task.way;
  for (const auto& [name, classes, need_way] :
       {std::tuple{"train", &train, way}, std::tuple{"val", &val, cfg.meta.val_tasks > 0 ? way : 0},
        std::tuple{"test", &test, cfg.eval.shape.way}}) {
    if (classes->size() < need_way) {
      throw ExperimentError(std::string("split: ") + name + " partition has " + std::to_string(classes->size()) +
                            " classes, " + std::to_string(need_way) + "-way tasks need at least " +
                            std::to_string(need_way));
    }
  }
  return LoadedData{std::move(*data), std::move(split), std::move(train), std::move(val), std::move(test)};
}

Arch make_arch(const ExperimentConfig& cfg, const Shape& sample_shape) {
  const auto& m = cfg.model;
  if (m.arch == "mlp") {
    if (sample_shape.size() != 1) {
      throw ExperimentError("model.arch mlp needs vector samples, dataset holds " + shape_str(sample_shape));
    }
    return Arch::mlp(sample_shape[0], m.hidden, m.features, m.slope);
  }
  if (sample_shape.size() != 3) {
    throw ExperimentError("model.arch conv needs [channels,height,width] samples, dataset holds " +
                          shape_str(sample_shape));
  }
  return Arch::conv(sample_shape, m.filters, m.kernel);
}

Experiment::Experiment(ExperimentConfig cfg, Notify info, Notify debug)
    : cfg_(std::move(cfg)), paths_{cfg_.output_dir}, info_(std::move(info)), debug_(std::move(debug)) {
  cfg_.validate();
}

void Experiment::say(const std::string& msg) const {
  if (info_) info_(msg);
}

void Experiment::say_debug(const std::string& msg) const {
  if (debug_) debug_(msg);
}

const LoadedData& Experiment::data() {
  if (!data_) {
    data_ = load_data(cfg_);
    say_debug("dataset: " + std::to_string(data_->data.num_classes()) + " classes, " +
              std::to_string(data_->data.size()) + " samples; split " + std::to_string(data_->train.size()) + "/" +
              std::to_string(data_->val.size()) + "/" + std::to_string(data_->test.size()));
  }
  return *data_;
}

void Experiment::prepare() {
  fs::create_directories(paths_.root);
  write_text(paths_.resolved_config(), dump_config(cfg_));
}

FeatureExtractor Experiment::pretrained_extractor(std::uint64_t* hash) const {
  const Checkpoint ckpt = Checkpoint::load(paths_.pretrain_checkpoint());
  if (get_phase(ckpt) != Phase::Pretrain) {
    throw ExperimentError(paths_.pretrain_checkpoint().string() + " is not a pretrain checkpoint");
  }
  if (hash) *hash = ckpt.hash();
  return get_extractor(ckpt);
}

MetaState Experiment::fresh_state(FeatureExtractor extractor, const MetaConfig& meta) const {
  Rng rng(cfg_.seed ^ kThetaStream);
  const std::size_t features = extractor.arch().feature_dim();
  return make_meta_state(std::move(extractor), init_classifier(features, meta.task.way, rng, cfg_.meta.classifier_hidden),
                         meta);
}

MetaConfig Experiment::eval_config(const MetaConfig& meta) const {
  if (cfg_.eval.shape.way != meta.task.way) {
    throw ExperimentError("eval.way (" + std::to_string(cfg_.eval.shape.way) + ") must equal the meta-trained way (" +
                          std::to_string(meta.task.way) + ")");
  }
  MetaConfig e = meta;
  e.task = cfg_.eval.shape;
  return e;
}

PretrainResult Experiment::pretrain() {
  const auto& d = data();
  prepare();
  MetricsLog log(paths_.metrics());
  log.write("run", 0, {{"stage", "pretrain"}, {"seed", cfg_.seed}});
  Rng rng(cfg_.seed);
  Arch arch = make_arch(cfg_, d.data.sample_shape());
  say("pretrain: " + arch.describe() + " on " + std::to_string(d.train.size()) + " classes, " +
      std::to_string(cfg_.pretrain.iterations) + " iterations");
  FeatureExtractor extractor(arch, rng);
  Classifier big = init_classifier(arch.feature_dim(), d.train.size(), rng, cfg_.pretrain.classifier_hidden);
  PretrainResult r = metashift::pretrain(d.data, d.train, std::move(extractor), std::move(big), cfg_.pretrain, &log);

  Checkpoint ckpt;
  put_phase(ckpt, Phase::Pretrain);
  ckpt.put_text("config", dump_config(cfg_));
  put_extractor(ckpt, r.extractor);
  ckpt.save(paths_.pretrain_checkpoint());

  std::ostringstream curve;
  curve << "# iteration rate loss batch_accuracy\n";
  for (const auto& p : r.curve) {
    curve << p.iteration << ' ' << p.rate << ' ' << fixed(p.loss) << ' ' << fixed(p.batch_accuracy) << '\n';
  }
  write_text(paths_.curve(), curve.str());
  say("pretrain: train accuracy " + fixed(r.train_accuracy, 4) +
      (r.holdout_accuracy >= 0.0 ? ", holdout accuracy " + fixed(r.holdout_accuracy, 4) : std::string()) +
      "; checkpoint " + paths_.pretrain_checkpoint().string());
  return r;
}

ScheduleResult Experiment::meta_train() {
  const auto& d = data();
  FeatureExtractor extractor = pretrained_extractor(nullptr);
  prepare();
  MetricsLog log(paths_.metrics());
  log.write("run", 0, {{"stage", "meta-train"}, {"seed", cfg_.seed}, {"mode", to_string(cfg_.meta.config.mode)}});
  MetaState state = fresh_state(std::move(extractor), cfg_.meta.config);
  const auto count = meta_param_count(state);
  say("meta-train: mode " + to_string(state.mode) + ", " + std::to_string(count.extractor_side) + " + " +
      std::to_string(count.classifier) + " meta parameters, " + std::to_string(cfg_.meta.tasks) + " tasks, HT " +
      (cfg_.ht.enabled ? "on" : "off"));
  ScheduleResult r = schedule(d.data, d.train, d.val, state, cfg_.meta.config, cfg_.ht, cfg_.schedule(), &log);
  for (const auto& phase : r.phases) {
    for (const auto& n : phase.notices) say("hard phase " + std::to_string(phase.index) + ": " + n);
  }

  Checkpoint ckpt;
  put_phase(ckpt, Phase::MetaTrain);
  ckpt.put_text("config", dump_config(cfg_));
  put_meta_state(ckpt, state, cfg_.meta.config.ss_scope);
  ckpt.save(paths_.meta_checkpoint());

  std::ostringstream trace;
  trace << "# iteration meta_steps accuracy half_width\n";
  for (const auto& p : r.trace) {
    trace << p.iteration << ' ' << p.meta_steps << ' ' << fixed(p.accuracy) << ' ' << fixed(p.half_width) << '\n';
  }
  write_text(paths_.trace(), trace.str());
  if (!r.trace.empty()) {
    say("meta-train: " + std::to_string(r.iterations) + " tasks (" + std::to_string(r.hard_tasks) + " hard), " +
        std::to_string(state.meta_steps) + " meta steps, final val accuracy " + fixed(r.trace.back().accuracy, 4));
  }
  return r;
}

EvalReport Experiment::meta_test(bool allow_no_meta) {
  const auto& d = data();
  std::optional<MetaState> state;
  std::string origin;
  if (fs::exists(paths_.meta_checkpoint())) {
    const Checkpoint ckpt = Checkpoint::load(paths_.meta_checkpoint());
    if (get_phase(ckpt) == Phase::MetaTrain) {
      state = get_meta_state(ckpt);
      origin = "meta-train checkpoint";
    } else if (!allow_no_meta) {
      throw ExperimentError(paths_.meta_checkpoint().string() +
                            " holds a pretrain-only model; pass --allow-no-meta to evaluate it");
    } else {
      state = fresh_state(get_extractor(ckpt), cfg_.meta.config);
      origin = "pretrain-only checkpoint";
    }
  } else if (allow_no_meta) {
    state = fresh_state(pretrained_extractor(nullptr), cfg_.meta.config);
    origin = "pretrain checkpoint without meta-training";
  } else {
    throw ExperimentError("checkpoint not found: " + paths_.meta_checkpoint().string() +
                          " (run meta-train first, or pass --allow-no-meta)");
  }
  prepare();
  MetaConfig meta = cfg_.meta.config;
  meta.mode = state->mode;
  const MetaConfig ecfg = eval_config(meta);
  say("meta-test: mode " + to_string(state->mode) + " from " + origin + ", " + std::to_string(cfg_.eval.tasks) + " tasks");
  EvalReport report =
      metashift::meta_test(d.data, d.test, *state, ecfg, cfg_.eval.tasks, ecfg.task, cfg_.seed ^ kEvalStream);

  MetricsLog log(paths_.metrics());
  log.write("run", 0, {{"stage", "meta-test"}, {"seed", cfg_.seed}, {"mode", report.mode}});
  for (std::size_t t = 0; t < report.accuracies.size(); ++t) log.write("meta-test", t, {{"accuracy", report.accuracies[t]}});
  nlohmann::json summary = report.to_json();
  summary.erase("accuracies");
  summary["event"] = "done";
  log.write("meta-test", report.tasks, summary);
  nlohmann::json doc = report.to_json();
  doc["source"] = origin;
  write_text(paths_.eval_report(), doc.dump(2) + "\n");
  say("meta-test: accuracy " + fixed(100.0 * report.mean, 2) + "% +- " + fixed(100.0 * report.half_width, 2) + "%");
  return report;
}

std::vector<AblationRow> Experiment::ablate() {
  if (!fs::exists(paths_.pretrain_checkpoint())) {
    pretrain();
  } else {
    say("ablate: reusing " + paths_.pretrain_checkpoint().string());
  }
  const auto& d = data();
  std::uint64_t pretrain_hash = 0;
  const FeatureExtractor extractor = pretrained_extractor(&pretrain_hash);
  prepare();
  fs::create_directories(paths_.ablation_dir());
  std::vector<AblationRow> rows;
  for (MetaMode mode : cfg_.ablate.modes) {
    MetaConfig meta = cfg_.meta.config;
    meta.mode = mode;
    MetaState state = fresh_state(extractor, meta);
    MetricsLog log(paths_.ablation_dir() / (file_stem(mode) + ".jsonl"));
    log.write("run", 0, {{"stage", "meta-train"}, {"seed", cfg_.seed}, {"mode", to_string(mode)}});
    schedule(d.data, d.train, d.val, state, meta, cfg_.ht, cfg_.schedule(), &log);
    Checkpoint ckpt;
    put_phase(ckpt, Phase::MetaTrain);
    ckpt.put_text("config", dump_config(cfg_));
    put_meta_state(ckpt, state, meta.ss_scope);
    ckpt.save(paths_.ablation_dir() / (file_stem(mode) + ".ckpt"));
    const MetaConfig ecfg = eval_config(meta);
    AblationRow row{mode, meta_param_count(state), state.meta_steps,
                    metashift::meta_test(d.data, d.test, state, ecfg, cfg_.eval.tasks, ecfg.task, cfg_.seed ^ kEvalStream),
                    pretrain_hash};
    log.write("meta-test", row.report.tasks, {{"mean", row.report.mean}, {"half_width", row.report.half_width}});
    say("ablate: " + to_string(mode) + " " + fixed(100.0 * row.report.mean, 2) + "% +- " +
        fixed(100.0 * row.report.half_width, 2) + "%");
    rows.push_back(std::move(row));
  }
  write_text(paths_.ablation_table(), format_ablation(rows));
  return rows;
}

std::vector<fs::path> Experiment::plot_data() {
  const LogSlices log = LogSlices::read(paths_.metrics());
  fs::create_directories(paths_.plot_dir());
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& header, const std::vector<nlohmann::json>& recs,
                  const std::function<bool(const nlohmann::json&, std::ostringstream&)>& row) {
    std::ostringstream out;
    out << header << '\n';
    std::size_t rows = 0;
    for (const auto& r : recs) rows += row(r, out);
    if (rows == 0) return;
    const fs::path file = paths_.plot_dir() / name;
    write_text(file, out.str());
    written.push_back(file);
  };
  emit("pretrain.dat", "# iteration loss batch_accuracy rate", log.phase("pretrain"), [](const auto& r, auto& out) {
    if (r.contains("event")) return false;
    out << r["iteration"].template get<std::size_t>() << ' ' << fixed(r["loss"].template get<double>()) << ' '
        << fixed(r["accuracy"].template get<double>()) << ' ' << r["rate"].template get<double>() << '\n';
    return true;
  });
  emit("meta_train.dat", "# iteration loss accuracy hard", log.phase("meta-train"), [](const auto& r, auto& out) {
    out << r["iteration"].template get<std::size_t>() << ' ' << fixed(r["loss"].template get<double>()) << ' '
        << fixed(r["accuracy"].template get<double>()) << ' ' << (r.value("kind", "") == "hard" ? 1 : 0) << '\n';
    return true;
  });
  emit("validation.dat", "# iteration accuracy half_width meta_steps", log.phase("validation"),
       [](const auto& r, auto& out) {
         out << r["iteration"].template get<std::size_t>() << ' ' << fixed(r["accuracy"].template get<double>()) << ' '
             << fixed(r["half_width"].template get<double>()) << ' ' << r["meta_steps"].template get<std::size_t>()
             << '\n';
         return true;
       });
  emit("meta_test.dat", "# task accuracy", log.phase("meta-test"), [](const auto& r, auto& out) {
    if (r.contains("event")) return false;
    out << r["iteration"].template get<std::size_t>() << ' ' << fixed(r["accuracy"].template get<double>()) << '\n';
    return true;
  });
  if (fs::exists(paths_.meta_checkpoint())) {
    const Checkpoint ckpt = Checkpoint::load(paths_.meta_checkpoint());
    if (get_phase(ckpt) == Phase::MetaTrain) {
      const MetaState state = get_meta_state(ckpt);
      if (state.mode == MetaMode::SS) {
        const SSStatistics st = ss_statistics(state.ss);
        for (const auto& [name, group] : {std::pair{"ss_scale.dat", st.scale}, std::pair{"ss_shift.dat", st.shift}}) {
          const fs::path file = paths_.plot_dir() / name;
          write_text(file, group.columns());
          written.push_back(file);
        }
      }
    }
  }
  if (written.empty()) say("plot-data: no plottable records in " + paths_.metrics().string());
  return written;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %10s %10s %12s %11s %10s\n", "mode", "accuracy", "ci95", "extractor_p",
                "classifier_p", "meta_steps");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-14s %10.4f %10.4f %12zu %11zu %10zu\n", to_string(r.mode).c_str(),
                  r.report.mean, r.report.half_width, r.params.extractor_side, r.params.classifier, r.meta_steps);
    out << line;
  }
  if (!rows.empty()) {
    std::snprintf(line, sizeof line, "# pretrain checkpoint hash %016llx\n",
                  static_cast<unsigned long long>(rows.front().pretrain_hash));
    out << line;
  }
  return out.str();
}

}  // namespace metashift
