#include "metashift/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace metashift {

namespace {

std::string split_mode_name(SplitMode mode) { return mode == SplitMode::ByClass ? "by-class" : "by-superclass"; }

SplitMode parse_split_mode(const std::string& name) {
  if (name == "by-class") return SplitMode::ByClass;
  if (name == "by-superclass") return SplitMode::BySuperclass;
  throw std::invalid_argument("unknown split mode '" + name + "' (expected by-class or by-superclass)");
}

// One YAML mapping being consumed. Every key read is recorded so that
// finish() can reject the rest.
class Section {
 public:
  Section(YAML::Node node, std::string path, const std::string& source)
      : node_(std::move(node)), path_(std::move(path)), source_(source) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail(node_, path_.empty() ? "config" : path_, "expected a mapping");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!node_ || node_.IsNull() || !node_[key]) return;
    const YAML::Node v = node_[key];
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      fail(v, where(key), "expected " + kind<T>());
    }
  }

  template <class T>
  void get_parsed(const char* key, T& out, const std::function<T(const std::string&)>& parse) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    try {
      out = parse(text);
    } catch (const std::exception& e) {
      fail(node_[key], where(key), e.what());
    }
  }

  void get_rate(const char* key, StepDecay& rate) {
    Section s = sub(key);
    s.get("init", rate.init);
    s.get("floor", rate.floor);
    s.get("halve_every", rate.halve_every);
    s.finish();
  }

  Section sub(const char* key) {
    used_.insert(key);
    YAML::Node child = node_ && node_.IsMap() ? node_[key] : YAML::Node();
    return Section(child, where(key), source_);
  }

  // Runs `check`, attributing any std::invalid_argument to this section.
  void check(const std::function<void()>& body) const {
    try {
      body();
    } catch (const std::invalid_argument& e) {
      fail(node_, path_, e.what());
    }
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) fail(kv.first, where(key.c_str()), "unknown key");
    }
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& key, const std::string& what) const {
    std::ostringstream msg;
    msg << source_;
    if (at && at.Mark().line >= 0) msg << ':' << at.Mark().line + 1;
    msg << ": " << key << ": " << what;
    throw ConfigError(msg.str());
  }

 private:
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  static std::string kind() {
    if constexpr (std::is_same_v<T, bool>) return "true or false";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else return "a list";
  }

  YAML::Node node_;
  std::string path_;
  const std::string& source_;
  std::set<std::string> used_;
};

void apply_override(YAML::Node& root, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "': expected key=value");
  const std::string path = item.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(item.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + item + "': " + e.msg);
  }
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) {
    if (k.empty()) throw ConfigError("override '" + item + "': empty key segment");
    keys.push_back(k);
  }
  // Rebuild the chain of mappings so the assignment lands in `root`.
  std::function<YAML::Node(YAML::Node, std::size_t)> set = [&](YAML::Node node, std::size_t i) -> YAML::Node {
    if (!node || node.IsNull()) node = YAML::Node(YAML::NodeType::Map);
    if (!node.IsMap()) {
      throw ConfigError("override '" + item + "': '" + keys[i - 1] + "' is not a section");
    }
    if (i + 1 == keys.size()) {
      node[keys[i]] = value;
    } else {
      node[keys[i]] = set(node[keys[i]], i + 1);
    }
    return node;
  };
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  root = set(root, 0);
}

void read_dataset(Section s, DatasetSection& d) {
  s.get("source", d.source);
  s.get("path", d.path);
  Section synth = s.sub("synth");
  synth.get("classes", d.synth.classes);
  synth.get("per_class", d.synth.per_class);
  synth.get("shape", d.synth.sample_shape);
  synth.get("noise", d.synth.noise);
  synth.get("superclasses", d.synth.superclasses);
  synth.get("superclass_share", d.synth.superclass_share);
  synth.get("seed", d.synth.seed);
  synth.finish();
  Section split = s.sub("split");
  split.get_parsed<SplitMode>("mode", d.split_mode, parse_split_mode);
  split.get("train", d.train);
  split.get("val", d.val);
  split.get("test", d.test);
  split.get("sizes", d.split_sizes);
  split.finish();
  s.check([&] {
    if (d.source != "synth" && d.source != "tensor-dir" && d.source != "packed-binary") {
      throw std::invalid_argument("source must be synth, tensor-dir or packed-binary, got '" + d.source + "'");
    }
    if (d.source != "synth" && d.path.empty()) throw std::invalid_argument("path is required for source " + d.source);
    if (d.train.empty() && d.val.empty() && d.test.empty() && d.split_sizes.size() != 3) {
      throw std::invalid_argument("split needs train/val/test lists or three sizes");
    }
  });
  s.finish();
}

void read_model(Section s, ModelSection& m) {
  s.get("arch", m.arch);
  s.get("hidden", m.hidden);
  s.get("features", m.features);
  s.get("filters", m.filters);
  s.get("kernel", m.kernel);
  s.get("slope", m.slope);
  s.check([&] {
    if (m.arch != "mlp" && m.arch != "conv") throw std::invalid_argument("arch must be mlp or conv, got '" + m.arch + "'");
    if (m.arch == "conv" && m.filters.empty()) throw std::invalid_argument("conv arch needs at least one filter count");
  });
  s.finish();
}

void read_pretrain(Section s, PretrainConfig& p) {
  s.get_rate("rate", p.rate);
  s.get("batch_size", p.batch_size);
  s.get("iterations", p.iterations);
  s.get("holdout_fraction", p.holdout_fraction);
  s.get("dropout_keep", p.dropout_keep);
  s.get("classifier_hidden", p.classifier_hidden);
  s.get("log_every", p.log_every);
  s.check([&] { p.validate(); });
  s.finish();
}

void read_task(Section& s, TaskShape& t) {
  s.get("way", t.way);
  s.get("k_train", t.k_train);
  s.get("k_test", t.k_test);
}

void read_meta(Section s, MetaSection& m) {
  auto& c = m.config;
  s.get_parsed<MetaMode>("mode", c.mode, parse_meta_mode);
  s.get_parsed<SSScope>("ss_scope", c.ss_scope, parse_ss_scope);
  s.get("inner_lr", c.inner_lr);
  s.get("inner_epochs", c.inner_epochs);
  s.get_rate("rate", c.meta_rate);
  s.get("meta_batch", c.meta_batch);
  s.get("first_order", c.first_order);
  read_task(s, c.task);
  s.get("tasks", m.tasks);
  s.get("val_every", m.val_every);
  s.get("val_tasks", m.val_tasks);
  s.get("classifier_hidden", m.classifier_hidden);
  s.check([&] {
    c.validate();
    if (m.tasks < 1) throw std::invalid_argument("meta: tasks must be >= 1");
  });
  s.finish();
}

void read_ht(Section s, HTConfig& h) {
  s.get("enabled", h.enabled);
  s.get("window", h.window);
  s.get("hard_tasks", h.hard_tasks);
  s.get_parsed<HardMethod>("method", h.method, parse_hard_method);
  s.check([&] { h.validate(); });
  s.finish();
}

void read_eval(Section s, EvalSection& e) {
  s.get("tasks", e.tasks);
  read_task(s, e.shape);
  s.check([&] {
    if (e.tasks < 2) throw std::invalid_argument("eval: tasks must be >= 2 for a confidence interval");
  });
  s.finish();
}

void read_ablate(Section s, AblateSection& a) {
  std::vector<std::string> names;
  s.get("modes", names);
  if (!names.empty()) {
    a.modes.clear();
    s.check([&] {
      for (const auto& n : names) a.modes.push_back(parse_meta_mode(n));
    });
  }
  s.finish();
}

YAML::Node rate_node(const StepDecay& r) {
  YAML::Node n;
  n["init"] = r.init;
  n["floor"] = r.floor;
  n["halve_every"] = r.halve_every;
  return n;
}

template <class T>
YAML::Node flow(const std::vector<T>& values) {
  YAML::Node n(YAML::NodeType::Sequence);
  for (const auto& v : values) n.push_back(v);
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

}  // namespace

void ExperimentConfig::validate() const {
  pretrain.validate();
  meta.config.validate();
  ht.validate();
  if (eval.tasks < 2) throw ConfigError("eval.tasks must be >= 2");
  if (meta.tasks < 1) throw ConfigError("meta.tasks must be >= 1");
  if (model.arch != "mlp" && model.arch != "conv") throw ConfigError("model.arch must be mlp or conv");
  if (ablate.modes.empty()) throw ConfigError("ablate.modes must not be empty");
}

ScheduleConfig ExperimentConfig::schedule() const {
  return {.total_tasks = meta.tasks, .val_every = meta.val_every, .val_tasks = meta.val_tasks, .seed = seed};
}

ExperimentConfig parse_config(const std::string& text, const std::string& source,
                              const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig cfg;
  Section top(root, "", source);
  top.get("seed", cfg.seed);
  top.get("output_dir", cfg.output_dir);
  read_dataset(top.sub("dataset"), cfg.dataset);
  read_model(top.sub("model"), cfg.model);
  read_pretrain(top.sub("pretrain"), cfg.pretrain);
  read_meta(top.sub("meta"), cfg.meta);
  read_ht(top.sub("ht"), cfg.ht);
  read_eval(top.sub("eval"), cfg.eval);
  read_ablate(top.sub("ablate"), cfg.ablate);
  top.finish();
  cfg.pretrain.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::ifstream in(file);
  if (!in) throw ConfigError("config not found: " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), file.string(), overrides);
}

std::string dump_config(const ExperimentConfig& cfg) {
  YAML::Node root;
  root["seed"] = cfg.seed;
  root["output_dir"] = cfg.output_dir;

  const auto& d = cfg.dataset;
  YAML::Node ds;
  ds["source"] = d.source;
  ds["path"] = d.path;
  ds["synth"]["classes"] = d.synth.classes;
  ds["synth"]["per_class"] = d.synth.per_class;
  ds["synth"]["shape"] = flow(d.synth.sample_shape);
  ds["synth"]["noise"] = d.synth.noise;
  ds["synth"]["superclasses"] = d.synth.superclasses;
  ds["synth"]["superclass_share"] = d.synth.superclass_share;
  ds["synth"]["seed"] = d.synth.seed;
  ds["split"]["mode"] = split_mode_name(d.split_mode);
  ds["split"]["train"] = flow(d.train);
  ds["split"]["val"] = flow(d.val);
  ds["split"]["test"] = flow(d.test);
  ds["split"]["sizes"] = flow(d.split_sizes);
  root["dataset"] = ds;

  YAML::Node m;
  m["arch"] = cfg.model.arch;
  m["hidden"] = cfg.model.hidden;
  m["features"] = cfg.model.features;
  m["filters"] = flow(cfg.model.filters);
  m["kernel"] = cfg.model.kernel;
  m["slope"] = cfg.model.slope;
  root["model"] = m;

  const auto& p = cfg.pretrain;
  YAML::Node pn;
  pn["rate"] = rate_node(p.rate);
  pn["batch_size"] = p.batch_size;
  pn["iterations"] = p.iterations;
  pn["holdout_fraction"] = p.holdout_fraction;
  pn["dropout_keep"] = p.dropout_keep;
  pn["classifier_hidden"] = flow(p.classifier_hidden);
  pn["log_every"] = p.log_every;
  root["pretrain"] = pn;

  const auto& mc = cfg.meta.config;
  YAML::Node mn;
  mn["mode"] = to_string(mc.mode);
  mn["ss_scope"] = to_string(mc.ss_scope);
  mn["inner_lr"] = mc.inner_lr;
  mn["inner_epochs"] = mc.inner_epochs;
  mn["rate"] = rate_node(mc.meta_rate);
  mn["meta_batch"] = mc.meta_batch;
  mn["first_order"] = mc.first_order;
  mn["way"] = mc.task.way;
  mn["k_train"] = mc.task.k_train;
  mn["k_test"] = mc.task.k_test;
  mn["tasks"] = cfg.meta.tasks;
  mn["val_every"] = cfg.meta.val_every;
  mn["val_tasks"] = cfg.meta.val_tasks;
  mn["classifier_hidden"] = flow(cfg.meta.classifier_hidden);
  root["meta"] = mn;

  YAML::Node hn;
  hn["enabled"] = cfg.ht.enabled;
  hn["window"] = cfg.ht.window;
  hn["hard_tasks"] = cfg.ht.hard_tasks;
  hn["method"] = to_string(cfg.ht.method);
  root["ht"] = hn;

  YAML::Node en;
  en["tasks"] = cfg.eval.tasks;
  en["way"] = cfg.eval.shape.way;
  en["k_train"] = cfg.eval.shape.k_train;
  en["k_test"] = cfg.eval.shape.k_test;
  root["eval"] = en;

  std::vector<std::string> modes;
  for (auto mode : cfg.ablate.modes) modes.push_back(to_string(mode));
  root["ablate"]["modes"] = flow(modes);

  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << root;
  return std::string(out.c_str()) + "\n";
}

}  // namespace metashift
