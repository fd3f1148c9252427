#include "metashift/meta_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

#include "metashift/autodiff.hpp"
#include "metashift/ops.hpp"

namespace metashift {

namespace {

using LogitsFn = std::function<Tensor(std::span<const Tensor>)>;

// The two-level problem of one episode. `outer` are leaves when tracked,
// raw state tensors otherwise; `inner_init` is what the base-learner starts
// from.
struct Problem {
  std::vector<Tensor> outer;
  std::vector<Tensor> inner_init;
  LossBuilder inner;
  LogitsFn test_logits;
  std::vector<int> y_test;
};

std::size_t side_count(const MetaState& s) {
  switch (s.mode) {
    case MetaMode::SS:
      return 2 * s.ss.layers.size();
    case MetaMode::FTFull:
    case MetaMode::FTBlock:
      return s.ft_weights.size();
    default:
      return 0;
  }
}

Tensor features_with(const MetaState& s, std::span<const Tensor> side, const Tensor& x) {
  switch (s.mode) {
    case MetaMode::SS:
      return s.extractor.ss_forward(x, SSParams::from_tensors(s.ss.layers, side));
    case MetaMode::FTFull:
    case MetaMode::FTBlock: {
      std::vector<LayerParams> params;
      for (std::size_t i = 0; i < s.extractor.num_layers(); ++i) {
        params.push_back({s.extractor.layer(i).weight, s.extractor.layer(i).bias, {}, {}});
      }
      for (std::size_t k = 0; k < s.ft_layers.size(); ++k) {
        params[s.ft_layers[k]].weight = side[2 * k];
        params[s.ft_layers[k]].bias = side[2 * k + 1];
      }
      return run_layers(s.extractor.arch(), params, x);
    }
    default:
      return s.extractor.forward(x);
  }
}

Problem build_problem(const Dataset& dataset, const Episode& episode, const MetaState& state, bool track) {
  Problem p;
  p.y_test = episode.test_labels;
  const Tensor x_train = dataset.batch(episode.train_indices);
  const Tensor x_test = dataset.batch(episode.test_indices);
  const std::vector<int> y_train = episode.train_labels;

  if (state.mode == MetaMode::UpdateAll) {
    const std::size_t n_ext = 2 * state.extractor.num_layers();
    const FeatureExtractor* ext = &state.extractor;
    p.inner_init = state.extractor.parameters();
    for (const auto& t : state.theta.params) p.inner_init.push_back(t);
    p.inner = [ext, n_ext, x_train, y_train](std::span<const Tensor> th) {
      return ops::softmax_cross_entropy(
          Classifier::forward_with(ext->forward_with(x_train, th.first(n_ext)), th.subspan(n_ext)), y_train);
    };
    p.test_logits = [ext, n_ext, x_test](std::span<const Tensor> th) {
      return Classifier::forward_with(ext->forward_with(x_test, th.first(n_ext)), th.subspan(n_ext));
    };
    return p;
  }

  std::vector<Tensor> raw = state.outer();
  const bool meta_learned = !skips_meta_training(state.mode);
  if (!meta_learned) raw = state.theta.params;
  for (const auto& t : raw) p.outer.push_back(track && meta_learned ? t.as_leaf() : t);
  const std::size_t n_side = meta_learned ? side_count(state) : 0;
  std::span<const Tensor> all(p.outer);
  const Tensor f_train = features_with(state, all.first(n_side), x_train);
  const Tensor f_test = features_with(state, all.first(n_side), x_test);
  p.inner_init.assign(p.outer.begin() + std::ptrdiff_t(n_side), p.outer.end());
  p.inner = [f_train, y_train](std::span<const Tensor> th) {
    return ops::softmax_cross_entropy(Classifier::forward_with(f_train, th), y_train);
  };
  p.test_logits = [f_test](std::span<const Tensor> th) { return Classifier::forward_with(f_test, th); };
  if (!meta_learned) p.outer.clear();
  return p;
}

UnrollOptions unroll_options(const MetaConfig& cfg, bool track) {
  return UnrollOptions{cfg.inner_epochs, cfg.inner_lr, cfg.first_order, track};
}

void check_pairing(const Episode& episode, const MetaState& state, const Adaptation& adaptation) {
  if (adaptation.episode != episode.fingerprint()) {
    throw std::invalid_argument("adaptation was produced on a different episode");
  }
  if (adaptation.outer != state.outer_hash()) {
    throw std::invalid_argument("adaptation was produced from different meta parameters");
  }
}

void require_meta_training(const MetaState& state) {
  if (skips_meta_training(state.mode)) {
    throw std::logic_error("mode " + to_string(state.mode) + " has no meta-training phase");
  }
}

std::vector<Tensor> detached(std::span<const Tensor> ts) {
  std::vector<Tensor> out;
  for (const auto& t : ts) out.push_back(t.detach());
  return out;
}

}  // namespace

MetaMode parse_meta_mode(const std::string& name) {
  if (name == "SS") return MetaMode::SS;
  if (name == "FT-full") return MetaMode::FTFull;
  if (name == "FT-block") return MetaMode::FTBlock;
  if (name == "FT-classifier") return MetaMode::FTClassifier;
  if (name == "update-theta" || name == "update-θ") return MetaMode::UpdateTheta;
  if (name == "update-all") return MetaMode::UpdateAll;
  throw std::invalid_argument("unknown mode \"" + name +
                              "\" (expected SS, FT-full, FT-block, FT-classifier, update-theta or update-all)");
}

std::string to_string(MetaMode mode) {
  switch (mode) {
    case MetaMode::SS:
      return "SS";
    case MetaMode::FTFull:
      return "FT-full";
    case MetaMode::FTBlock:
      return "FT-block";
    case MetaMode::FTClassifier:
      return "FT-classifier";
    case MetaMode::UpdateTheta:
      return "update-theta";
    case MetaMode::UpdateAll:
      return "update-all";
  }
  return "?";
}

bool skips_meta_training(MetaMode mode) { return mode == MetaMode::UpdateTheta || mode == MetaMode::UpdateAll; }

SSScope parse_ss_scope(const std::string& name) {
  if (name == "all") return SSScope::All;
  if (name == "last") return SSScope::Last;
  throw std::invalid_argument("unknown ss_scope \"" + name + "\" (expected all or last)");
}

std::string to_string(SSScope scope) { return scope == SSScope::All ? "all" : "last"; }

void MetaConfig::validate() const {
  if (!(inner_lr > 0.0) || !std::isfinite(inner_lr)) throw std::invalid_argument("meta: inner_lr must be > 0");
  if (inner_epochs < 1) throw std::invalid_argument("meta: inner_epochs must be >= 1");
  meta_rate.validate("meta");
  if (meta_batch < 1) throw std::invalid_argument("meta: meta_batch must be >= 1");
  if (task.way < 1 || task.k_train < 1 || task.k_test < 1) {
    throw std::invalid_argument("meta: way, k_train and k_test must be >= 1");
  }
}

std::vector<Tensor> MetaState::outer() const {
  std::vector<Tensor> out;
  switch (mode) {
    case MetaMode::SS:
      out = ss.tensors();
      break;
    case MetaMode::FTFull:
    case MetaMode::FTBlock:
      out = ft_weights;
      break;
    case MetaMode::FTClassifier:
      break;
    case MetaMode::UpdateTheta:
    case MetaMode::UpdateAll:
      return out;
  }
  out.insert(out.end(), theta.params.begin(), theta.params.end());
  return out;
}

void MetaState::set_outer(std::span<const Tensor> values) {
  const auto current = outer();
  if (values.size() != current.size()) throw std::invalid_argument("set_outer: tensor count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != current[i].shape()) throw ShapeError("set_outer", "outer tensor shape changed");
  }
  if (skips_meta_training(mode)) return;
  const std::size_t n_side = side_count(*this);
  if (mode == MetaMode::SS) {
    ss = SSParams::from_tensors(ss.layers, detached(values.first(n_side)));
  } else if (mode == MetaMode::FTFull || mode == MetaMode::FTBlock) {
    ft_weights = detached(values.first(n_side));
  }
  theta.params = detached(values.subspan(n_side));
}

std::uint64_t MetaState::outer_hash() const {
  std::vector<Tensor> all = outer();
  if (skips_meta_training(mode)) all = theta.params;
  return hash_tensors(all);
}

Tensor MetaState::features(const Tensor& x) const {
  const auto side = outer();
  return features_with(*this, std::span<const Tensor>(side).first(skips_meta_training(mode) ? 0 : side_count(*this)),
                       x);
}

MetaState make_meta_state(FeatureExtractor extractor, Classifier theta, const MetaConfig& cfg) {
  cfg.validate();
  if (!extractor.frozen()) throw std::invalid_argument("meta state needs a frozen extractor");
  if (theta.feature_dim() != extractor.arch().feature_dim()) {
    throw std::invalid_argument("classifier input " + std::to_string(theta.feature_dim()) +
                                " does not match feature dim " + std::to_string(extractor.arch().feature_dim()));
  }
  if (theta.way() != cfg.task.way) {
    throw std::invalid_argument("classifier has " + std::to_string(theta.way()) + " outputs for " +
                                std::to_string(cfg.task.way) + "-way tasks");
  }
  MetaState s{std::move(extractor), cfg.mode, {}, {}, {}, std::move(theta), 0};
  const std::size_t last = s.extractor.num_layers() - 1;
  std::vector<std::size_t> all(s.extractor.num_layers());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (cfg.mode == MetaMode::SS) {
    s.ss = s.extractor.init_ss(cfg.ss_scope == SSScope::All ? all : std::vector<std::size_t>{last});
  } else if (cfg.mode == MetaMode::FTFull || cfg.mode == MetaMode::FTBlock) {
    s.ft_layers = cfg.mode == MetaMode::FTFull ? all : std::vector<std::size_t>{last};
    for (auto i : s.ft_layers) {
      s.ft_weights.push_back(s.extractor.layer(i).weight);
      s.ft_weights.push_back(s.extractor.layer(i).bias);
    }
  }
  return s;
}

MetaParamCount meta_param_count(const MetaState& state) {
  MetaParamCount c;
  if (skips_meta_training(state.mode)) return c;
  const auto outer = state.outer();
  const std::size_t n_side = side_count(state);
  for (std::size_t i = 0; i < outer.size(); ++i) (i < n_side ? c.extractor_side : c.classifier) += outer[i].numel();
  return c;
}

Adaptation base_learn(const Dataset& dataset, const Episode& episode, const MetaState& state,
                      const MetaConfig& cfg) {
  if (episode.way != state.theta.way()) {
    throw std::invalid_argument("classifier has " + std::to_string(state.theta.way()) + " outputs for a " +
                                std::to_string(episode.way) + "-way episode");
  }
  if (!state.extractor.frozen()) throw std::invalid_argument("base_learn needs a frozen extractor");
  Problem p = build_problem(dataset, episode, state, false);
  auto adapted = unroll_inner_steps(p.inner, p.inner_init, unroll_options(cfg, false));
  return Adaptation{episode.fingerprint(), state.outer_hash(), detached(adapted)};
}

MetaGradient meta_gradient(const Dataset& dataset, const Episode& episode, const MetaState& state,
                           const Adaptation& adaptation, const MetaConfig& cfg) {
  require_meta_training(state);
  check_pairing(episode, state, adaptation);
  Problem p = build_problem(dataset, episode, state, true);
  const auto y_test = p.y_test;
  const auto logits = p.test_logits;
  LossBuilder meta = [&](std::span<const Tensor> th) { return ops::softmax_cross_entropy(logits(th), y_test); };
  auto result = grad_through_unrolled_steps(p.inner, meta, p.outer, p.inner_init, unroll_options(cfg, true));
  return MetaGradient{detached(result.outer_grads), result.meta_loss};
}

void apply_meta_step(MetaState& state, std::span<const MetaGradient> grads, const MetaConfig& cfg) {
  require_meta_training(state);
  if (grads.empty()) throw std::invalid_argument("apply_meta_step: empty meta-batch");
  const auto outer = state.outer();
  const double rate = cfg.meta_rate.rate(state.meta_steps);
  std::vector<Tensor> next;
  for (std::size_t i = 0; i < outer.size(); ++i) {
    std::vector<double> v = outer[i].to_vector();
    std::vector<double> mean(v.size(), 0.0);
    for (const auto& g : grads) {
      if (g.grads.size() != outer.size() || g.grads[i].shape() != outer[i].shape()) {
        throw ShapeError("apply_meta_step", "gradient does not match the meta parameters");
      }
      auto gd = g.grads[i].data();
      for (std::size_t k = 0; k < v.size(); ++k) mean[k] += gd[k];
    }
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= rate * (mean[k] / double(grads.size()));
    if (!all_finite(v)) throw std::runtime_error("non-finite meta parameters at meta step " + std::to_string(state.meta_steps));
    next.push_back(Tensor::from(outer[i].shape(), std::move(v)));
  }
  state.set_outer(next);
  ++state.meta_steps;
}

void meta_update(const Dataset& dataset, const Episode& episode, MetaState& state, const Adaptation& adaptation,
                 const MetaConfig& cfg) {
  MetaGradient g = meta_gradient(dataset, episode, state, adaptation, cfg);
  apply_meta_step(state, std::span<const MetaGradient>(&g, 1), cfg);
}

ClassAccuracy hardest(std::span<const ClassAccuracy> per_class) {
  if (per_class.empty()) throw std::invalid_argument("hardest: no classes");
  ClassAccuracy best = per_class[0];
  for (const auto& c : per_class.subspan(1)) {
    if (c.accuracy < best.accuracy || (c.accuracy == best.accuracy && c.class_id < best.class_id)) best = c;
  }
  return best;
}

TaskOutcome summarize(const Episode& episode, const std::vector<int>& predicted, double test_loss) {
  if (predicted.size() != episode.test_labels.size()) {
    throw std::invalid_argument("summarize: prediction count does not match the test split");
  }
  TaskOutcome out;
  out.episode = episode.fingerprint();
  out.test_loss = test_loss;
  std::vector<std::size_t> correct(episode.way, 0), total(episode.way, 0);
  std::size_t all_correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto label = std::size_t(episode.test_labels[i]);
    ++total[label];
    if (predicted[i] == episode.test_labels[i]) ++correct[label], ++all_correct;
  }
  out.accuracy = predicted.empty() ? 0.0 : double(all_correct) / double(predicted.size());
  for (std::size_t l = 0; l < episode.way; ++l) {
    out.per_class.push_back({episode.class_map[l], total[l] ? double(correct[l]) / double(total[l]) : 0.0});
  }
  const ClassAccuracy worst = hardest(out.per_class);
  out.hardest_class = worst.class_id;
  out.hardest_accuracy = worst.accuracy;
  out.perfect = std::all_of(out.per_class.begin(), out.per_class.end(), [](const auto& c) { return c.accuracy == 1.0; });
  const auto label = int(std::find(episode.class_map.begin(), episode.class_map.end(), worst.class_id) -
                         episode.class_map.begin());
  for (std::size_t i = 0; i < episode.train_indices.size(); ++i) {
    if (episode.train_labels[i] == label) out.hardest_train_indices.push_back(episode.train_indices[i]);
  }
  for (std::size_t i = 0; i < episode.test_indices.size(); ++i) {
    if (episode.test_labels[i] == label) out.hardest_test_indices.push_back(episode.test_indices[i]);
  }
  return out;
}

std::vector<int> predict_test(const Dataset& dataset, const Episode& episode, const MetaState& state,
                              const Adaptation& adaptation) {
  check_pairing(episode, state, adaptation);
  NoGradGuard no_grad;
  Problem p = build_problem(dataset, episode, state, false);
  return ops::argmax_rows(p.test_logits(adaptation.adapted));
}

std::vector<TaskOutcome> run_meta_batch(const Dataset& dataset, std::span<const Episode> episodes, MetaState& state,
                                        const MetaConfig& cfg, std::uint64_t first_task_id) {
  require_meta_training(state);
  if (episodes.empty()) throw std::invalid_argument("run_meta_batch: empty meta-batch");
  std::vector<MetaGradient> grads;
  std::vector<TaskOutcome> outcomes;
  for (std::size_t t = 0; t < episodes.size(); ++t) {
    const Episode& ep = episodes[t];
    if (ep.way != state.theta.way()) throw std::invalid_argument("run_meta_batch: episode way does not match θ");
    Problem p = build_problem(dataset, ep, state, true);
    const auto y_test = p.y_test;
    const auto logits = p.test_logits;
    LossBuilder meta = [&](std::span<const Tensor> th) { return ops::softmax_cross_entropy(logits(th), y_test); };
    auto result = grad_through_unrolled_steps(p.inner, meta, p.outer, p.inner_init, unroll_options(cfg, true));
    std::vector<int> predicted;
    {
      NoGradGuard no_grad;
      predicted = ops::argmax_rows(logits(detached(result.adapted)));
    }
    TaskOutcome outcome = summarize(ep, predicted, result.meta_loss);
    outcome.task_id = first_task_id + t;
    outcomes.push_back(std::move(outcome));
    grads.push_back(MetaGradient{detached(result.outer_grads), result.meta_loss});
  }
  apply_meta_step(state, grads, cfg);
  return outcomes;
}

TaskOutcome run_task(const Dataset& dataset, const Episode& episode, MetaState& state, const MetaConfig& cfg,
                     std::uint64_t task_id) {
  return run_meta_batch(dataset, std::span<const Episode>(&episode, 1), state, cfg, task_id).front();
}

double evaluate_task(const Dataset& dataset, const Episode& episode, const MetaState& state, const MetaConfig& cfg) {
  const Adaptation a = base_learn(dataset, episode, state, cfg);
  const auto predicted = predict_test(dataset, episode, state, a);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == episode.test_labels[i];
  return double(correct) / double(episode.way * episode.k_test);
}

}  // namespace metashift
