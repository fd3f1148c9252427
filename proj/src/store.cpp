#include "metashift/store.hpp"

#include <stdexcept>

namespace metashift {

namespace {

std::string indexed(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

std::vector<Tensor> get_series(const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; ckpt.has(indexed(prefix, i)); ++i) out.push_back(ckpt.get(indexed(prefix, i)));
  return out;
}

void put_series(Checkpoint& ckpt, const std::string& prefix, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) ckpt.put(indexed(prefix, i), values[i]);
}

}  // namespace

std::string to_string(Phase phase) { return phase == Phase::Pretrain ? "pretrain" : "meta-train"; }

Phase parse_phase(const std::string& name) {
  if (name == "pretrain") return Phase::Pretrain;
  if (name == "meta-train") return Phase::MetaTrain;
  throw CheckpointError("unknown phase tag '" + name + "'");
}

void put_phase(Checkpoint& ckpt, Phase phase) { ckpt.put_text("phase", to_string(phase)); }

Phase get_phase(const Checkpoint& ckpt) { return parse_phase(ckpt.get_text("phase")); }

void put_extractor(Checkpoint& ckpt, const FeatureExtractor& extractor) {
  const auto code = extractor.arch().encode();
  ckpt.put("extractor/arch", Tensor::from({code.size()}, code));
  ckpt.put("extractor/frozen", Tensor::scalar(extractor.frozen() ? 1.0 : 0.0));
  put_series(ckpt, "extractor/param", extractor.parameters());
}

FeatureExtractor get_extractor(const Checkpoint& ckpt) {
  Arch arch = Arch::decode(ckpt.get("extractor/arch").to_vector());
  const auto params = get_series(ckpt, "extractor/param");
  if (params.size() != 2 * arch.layers.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(params.size()) + " extractor tensors, architecture needs " +
                          std::to_string(2 * arch.layers.size()));
  }
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    layers.push_back(Layer{arch.layers[i], params[2 * i], params[2 * i + 1]});
  }
  FeatureExtractor e(std::move(arch), std::move(layers));
  if (ckpt.get("extractor/frozen").item() != 0.0) e.freeze();
  return e;
}

void put_meta_state(Checkpoint& ckpt, const MetaState& state, SSScope scope) {
  put_extractor(ckpt, state.extractor);
  ckpt.put_text("meta/mode", to_string(state.mode));
  ckpt.put_text("meta/ss_scope", to_string(scope));
  ckpt.put("meta/steps", Tensor::scalar(double(state.meta_steps)));
  put_series(ckpt, "meta/theta", state.theta.params);
  put_series(ckpt, "meta/outer", state.outer());
}

SSScope get_ss_scope(const Checkpoint& ckpt) { return parse_ss_scope(ckpt.get_text("meta/ss_scope")); }

MetaState get_meta_state(const Checkpoint& ckpt) {
  MetaConfig cfg;
  cfg.mode = parse_meta_mode(ckpt.get_text("meta/mode"));
  cfg.ss_scope = get_ss_scope(ckpt);
  Classifier theta{get_series(ckpt, "meta/theta")};
  if (theta.params.empty()) throw CheckpointError("checkpoint holds no classifier");
  cfg.task.way = theta.way();
  MetaState s = make_meta_state(get_extractor(ckpt), std::move(theta), cfg);
  const auto outer = get_series(ckpt, "meta/outer");
  if (outer.size() != s.outer().size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(outer.size()) + " meta tensors, mode " +
                          to_string(cfg.mode) + " needs " + std::to_string(s.outer().size()));
  }
  s.set_outer(outer);
  s.meta_steps = static_cast<std::size_t>(ckpt.get("meta/steps").item());
  return s;
}

}  // namespace metashift
