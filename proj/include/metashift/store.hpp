#pragma once

#include <string>

#include "metashift/checkpoint.hpp"
#include "metashift/meta_trainer.hpp"
#include "metashift/model.hpp"

namespace metashift {

/// Phase tag written by the pipeline stage that produced a checkpoint.
enum class Phase { Pretrain, MetaTrain };

std::string to_string(Phase phase);
Phase parse_phase(const std::string& name);

void put_phase(Checkpoint& ckpt, Phase phase);
Phase get_phase(const Checkpoint& ckpt);

/// Architecture, weights and frozen flag under "extractor/".
void put_extractor(Checkpoint& ckpt, const FeatureExtractor& extractor);
FeatureExtractor get_extractor(const Checkpoint& ckpt);

/// Mode, SS scope, θ, meta-learned tensors and step count under "meta/",
/// plus the extractor.
void put_meta_state(Checkpoint& ckpt, const MetaState& state, SSScope scope);
/// Rebuilds the state saved by put_meta_state.
MetaState get_meta_state(const Checkpoint& ckpt);
SSScope get_ss_scope(const Checkpoint& ckpt);

}  // namespace metashift
