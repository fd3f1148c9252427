#include "metashift/episode.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>

namespace metashift {

namespace {

std::uint64_t fnv(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 1099511628211ULL;
  }
  return h;
}

void check_request(std::size_t way, std::size_t k_train, std::size_t k_test) {
  if (way < 1) throw DatasetError("episode: way must be >= 1");
  if (k_train < 1 || k_test < 1) throw DatasetError("episode: shot counts must be >= 1");
}

// Fills the splits for one class from `train_pool` (train picks) and the rest
// of the class (test picks), keeping the two disjoint.
void draw_class(const Dataset& dataset, int class_id, int label, const std::vector<std::size_t>& train_pool,
                std::size_t k_train, std::size_t k_test, Rng& rng, Episode& ep) {
  const auto& all = dataset.class_samples(class_id);
  if (all.size() < k_train + k_test) {
    throw DatasetError("class " + std::to_string(class_id) + " has " + std::to_string(all.size()) +
                       " samples, episode needs " + std::to_string(k_train + k_test));
  }
  std::vector<std::size_t> train;
  for (auto pos : rng.choose(train_pool.size(), k_train)) train.push_back(train_pool[pos]);
  std::set<std::size_t> taken(train.begin(), train.end());
  std::vector<std::size_t> rest;
  for (auto i : all) {
    if (!taken.count(i)) rest.push_back(i);
  }
  for (auto i : train) {
    ep.train_indices.push_back(i);
    ep.train_labels.push_back(label);
  }
  for (auto pos : rng.choose(rest.size(), k_test)) {
    ep.test_indices.push_back(rest[pos]);
    ep.test_labels.push_back(label);
  }
}

}  // namespace

std::uint64_t Episode::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  h = fnv(h, way);
  for (int c : class_map) h = fnv(h, static_cast<std::uint64_t>(c));
  for (auto i : train_indices) h = fnv(h, i);
  h = fnv(h, 0xffffffffULL);
  for (auto i : test_indices) h = fnv(h, i);
  return h;
}

Episode sample_episode(const Dataset& dataset, std::span<const int> classes, std::size_t way, std::size_t k_train,
                       std::size_t k_test, Rng& rng) {
  check_request(way, k_train, k_test);
  if (classes.size() < way) {
    throw DatasetError("episode: partition has " + std::to_string(classes.size()) + " classes, need " +
                       std::to_string(way));
  }
  Episode ep;
  ep.way = way;
  ep.k_train = k_train;
  ep.k_test = k_test;
  for (auto pos : rng.choose(classes.size(), way)) {
    const int c = classes[pos];
    const int label = static_cast<int>(ep.class_map.size());
    ep.class_map.push_back(c);
    ep.provenance.push_back(ClassSource::Random);
    draw_class(dataset, c, label, dataset.class_samples(c), k_train, k_test, rng, ep);
  }
  return ep;
}

HardMethod parse_hard_method(const std::string& name) {
  if (name == "reuse") return HardMethod::Reuse;
  if (name == "resample") return HardMethod::Resample;
  throw std::invalid_argument("unknown hard-task method \"" + name + "\" (expected reuse or resample)");
}

std::string to_string(HardMethod method) { return method == HardMethod::Reuse ? "reuse" : "resample"; }

Episode sample_hard_episode(const Dataset& dataset, std::span<const int> classes, std::span<const FailureEntry> pool,
                            std::size_t way, std::size_t k_train, std::size_t k_test, HardMethod method, Rng& rng,
                            std::vector<std::string>* notices) {
  check_request(way, k_train, k_test);
  if (pool.empty()) throw DatasetError("hard episode: failure pool is empty");

  // Distinct pool classes in first-seen order, with multiplicities and the
  // union of their recorded samples.
  std::vector<int> order;
  std::map<int, std::size_t> weight;
  std::map<int, std::vector<std::size_t>> recorded;
  for (const auto& e : pool) {
    if (!weight.count(e.class_id)) order.push_back(e.class_id);
    weight[e.class_id] += 1;
    auto& rec = recorded[e.class_id];
    for (auto i : e.train_indices) rec.push_back(i);
    for (auto i : e.test_indices) rec.push_back(i);
  }

  Episode ep;
  ep.way = way;
  ep.k_train = k_train;
  ep.k_test = k_test;
  std::vector<int> candidates = order;
  while (ep.class_map.size() < way && !candidates.empty()) {
    std::size_t total = 0;
    for (int c : candidates) total += weight[c];
    std::uint64_t ticket = rng.below(total);
    std::size_t pick = 0;
    while (ticket >= weight[candidates[pick]]) ticket -= weight[candidates[pick++]];
    ep.class_map.push_back(candidates[pick]);
    ep.provenance.push_back(ClassSource::FailurePool);
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  if (ep.class_map.size() < way) {
    std::vector<int> fillers;
    for (int c : classes) {
      if (std::find(ep.class_map.begin(), ep.class_map.end(), c) == ep.class_map.end()) fillers.push_back(c);
    }
    const std::size_t missing = way - ep.class_map.size();
    if (fillers.size() < missing) {
      throw DatasetError("hard episode: only " + std::to_string(fillers.size()) + " padding classes for " +
                         std::to_string(missing) + " open slots");
    }
    for (auto pos : rng.choose(fillers.size(), missing)) {
      ep.class_map.push_back(fillers[pos]);
      ep.provenance.push_back(ClassSource::Padding);
    }
  }

  for (std::size_t label = 0; label < ep.class_map.size(); ++label) {
    const int c = ep.class_map[label];
    const std::vector<std::size_t>* train_pool = &dataset.class_samples(c);
    std::vector<std::size_t> reused;
    if (method == HardMethod::Reuse && ep.provenance[label] == ClassSource::FailurePool) {
      std::set<std::size_t> unique(recorded[c].begin(), recorded[c].end());
      reused.assign(unique.begin(), unique.end());
      if (reused.size() >= k_train && dataset.class_samples(c).size() >= k_train + k_test) {
        train_pool = &reused;
      } else if (notices) {
        notices->push_back("class " + std::to_string(c) + ": " + std::to_string(reused.size()) +
                           " recorded samples, falling back to resample");
      }
    }
    draw_class(dataset, c, static_cast<int>(label), *train_pool, k_train, k_test, rng, ep);
  }
  return ep;
}

}  // namespace metashift
