#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "metashift/dataset.hpp"
#include "metashift/episode.hpp"

using namespace metashift;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("metashift_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

double nearest_mean_accuracy(const Dataset& d) {
  // Means from even-indexed samples, accuracy on odd-indexed ones.
  const std::size_t dim = d.sample_numel();
  std::vector<std::vector<double>> means(d.num_classes(), std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < d.num_classes(); ++c) {
    const auto& idx = d.class_samples(int(c));
    std::size_t n = 0;
    for (std::size_t k = 0; k < idx.size(); k += 2, ++n) {
      auto f = d.features(idx[k]);
      for (std::size_t i = 0; i < dim; ++i) means[c][i] += f[i];
    }
    for (auto& v : means[c]) v /= double(n);
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t c = 0; c < d.num_classes(); ++c) {
    const auto& idx = d.class_samples(int(c));
    for (std::size_t k = 1; k < idx.size(); k += 2) {
      auto f = d.features(idx[k]);
      std::size_t best = 0;
      double best_dist = 1e300;
      for (std::size_t m = 0; m < means.size(); ++m) {
        double dist = 0;
        for (std::size_t i = 0; i < dim; ++i) dist += (f[i] - means[m][i]) * (f[i] - means[m][i]);
        if (dist < best_dist) best_dist = dist, best = m;
      }
      correct += best == c;
      ++total;
    }
  }
  return double(correct) / double(total);
}

}  // namespace

TEST_CASE("tensor-dir round trip of an 8x40 fixture") {
  TempDir tmp("tensordir");
  Dataset synth = synth_generate({.classes = 8, .per_class = 40, .sample_shape = {16}, .seed = 7});
  write_tensor_dir(synth, tmp.path);
  Dataset loaded = load_dataset(tmp.path, DatasetFormat::TensorDir, 16);
  CHECK(loaded.num_classes() == 8);
  CHECK(loaded.size() == 320);
  CHECK(loaded.sample_shape() == Shape{16});
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded.label(i) == synth.label(i));
    auto a = loaded.features(i);
    auto b = synth.features(i);
    for (std::size_t k = 0; k < a.size(); ++k) REQUIRE(a[k] == double(float(b[k])));
  }
}

TEST_CASE("packed-binary round trip keeps super-class-free ids and values") {
  TempDir tmp("packed");
  Dataset synth = synth_generate({.classes = 5, .per_class = 6, .sample_shape = {1, 4, 4}, .seed = 1});
  write_packed_binary(synth, tmp.path / "data.mtpk");
  Dataset loaded = load_dataset(tmp.path / "data.mtpk", DatasetFormat::PackedBinary);
  CHECK(loaded.num_classes() == 5);
  CHECK(loaded.size() == 30);
  CHECK(loaded.sample_shape() == Shape{1, 4, 4});
  CHECK(loaded.features(17)[3] == double(float(synth.features(17)[3])));
}

TEST_CASE("tensor-dir keeps super-class labels") {
  TempDir tmp("super");
  Dataset synth = synth_generate({.classes = 6, .per_class = 3, .sample_shape = {4}, .superclasses = 3, .seed = 2});
  write_tensor_dir(synth, tmp.path);
  Dataset loaded = load_dataset(tmp.path, DatasetFormat::TensorDir);
  REQUIRE(loaded.has_superclasses());
  for (int c = 0; c < 6; ++c) CHECK(loaded.superclass(c) == synth.superclass(c));
}

TEST_CASE("loader errors") {
  TempDir tmp("errors");
  SUBCASE("empty directory") {
    CHECK(error_of([&] { load_dataset(tmp.path, DatasetFormat::TensorDir); }).find("no classes found") !=
          std::string::npos);
  }
  SUBCASE("class below the episode minimum is named") {
    Dataset d({2}, {{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}, {6, 6}, {7, 7}, {8, 8}, {9, 9}, {1, 0}, {2, 0},
                    {3, 0}, {4, 0}, {5, 0}, {6, 0}, {7, 7}, {7, 8}, {7, 9}},
              {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1});
    write_tensor_dir(d, tmp.path);
    auto msg = error_of([&] { load_dataset(tmp.path, DatasetFormat::TensorDir, 1 + 15); });
    CHECK(msg.find("class 1") != std::string::npos);
    CHECK(msg.find("3 samples") != std::string::npos);
  }
  SUBCASE("malformed sample reports file and offset") {
    fs::create_directories(tmp.path / "a");
    std::ofstream(tmp.path / "a" / "s0", std::ios::binary) << "MTSR\x01";
    auto msg = error_of([&] { load_dataset(tmp.path, DatasetFormat::TensorDir); });
    CHECK(msg.find("s0") != std::string::npos);
    CHECK(msg.find("offset 4") != std::string::npos);
  }
  SUBCASE("bad packed magic") {
    std::ofstream(tmp.path / "x.bin", std::ios::binary) << "NOPE1234";
    auto msg = error_of([&] { load_dataset(tmp.path / "x.bin", DatasetFormat::PackedBinary); });
    CHECK(msg.find("offset 0") != std::string::npos);
    CHECK(msg.find("magic") != std::string::npos);
  }
}

TEST_CASE("synthetic generation") {
  SUBCASE("same seed, same bits") {
    SynthSpec spec{.classes = 8, .per_class = 40, .sample_shape = {16}, .seed = 7};
    Dataset a = synth_generate(spec);
    Dataset b = synth_generate(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(std::equal(a.features(i).begin(), a.features(i).end(), b.features(i).begin()));
    }
  }
  SUBCASE("zero noise collapses each class onto its mean") {
    Dataset d = synth_generate({.classes = 6, .per_class = 5, .sample_shape = {8}, .noise = 0.0, .seed = 11});
    for (int c = 0; c < 6; ++c) {
      const auto& idx = d.class_samples(c);
      for (auto i : idx) CHECK(std::equal(d.features(i).begin(), d.features(i).end(), d.features(idx[0]).begin()));
    }
    CHECK(nearest_mean_accuracy(d) == 1.0);
  }
  SUBCASE("image fixture satisfies the dataset invariants") {
    Dataset d = synth_generate({.classes = 20, .per_class = 30, .sample_shape = {1, 16, 16}, .seed = 3});
    CHECK(d.num_classes() == 20);
    CHECK(d.size() == 600);
    d.require_min_samples(16);
    for (int c = 0; c < 20; ++c) CHECK(d.class_samples(c).size() == 30);
    CHECK(nearest_mean_accuracy(d) > 0.95);
  }
  SUBCASE("classes are linearly separable at noise 0.1") {
    CHECK(nearest_mean_accuracy(synth_generate({.classes = 20, .per_class = 40, .sample_shape = {16}, .seed = 5})) >
          0.95);
  }
  CHECK_THROWS_AS(synth_generate({.classes = 1}), DatasetError);
  CHECK_THROWS_AS(synth_generate({.classes = 3, .per_class = 1}), DatasetError);
}

TEST_CASE("split validation") {
  Dataset d = synth_generate({.classes = 10, .per_class = 2, .sample_shape = {2}, .superclasses = 5, .seed = 1});
  validate_split(contiguous_split(SplitMode::ByClass, 6, 2, 2), d);
  validate_split(contiguous_split(SplitMode::BySuperclass, 3, 1, 1), d);
  SplitSpec overlap{SplitMode::ByClass, {0, 1, 2, 3, 4, 5}, {5, 6, 7}, {8, 9}};
  CHECK(error_of([&] { validate_split(overlap, d); }).find("both") != std::string::npos);
  SplitSpec gap{SplitMode::ByClass, {0, 1, 2, 3, 4}, {6, 7}, {8, 9}};
  CHECK(error_of([&] { validate_split(gap, d); }).find("not assigned") != std::string::npos);
  auto test_classes = partition_classes(d, contiguous_split(SplitMode::BySuperclass, 3, 1, 1), Partition::Test);
  CHECK(test_classes == std::vector<int>{8, 9});
}

TEST_CASE("episode sampling") {
  Dataset d = synth_generate({.classes = 10, .per_class = 20, .sample_shape = {4}, .seed = 9});
  std::vector<int> classes{0, 1, 2, 3, 4, 5, 6};
  SUBCASE("5-way 1-shot with 15 queries per class") {
    Rng rng(1);
    Episode ep = sample_episode(d, classes, 5, 1, 15, rng);
    CHECK(ep.train_indices.size() == 5);
    CHECK(ep.test_indices.size() == 75);
    CHECK(std::set<int>(ep.class_map.begin(), ep.class_map.end()).size() == 5);
  }
  SUBCASE("way equal to the partition size uses every class") {
    Rng rng(2);
    Episode ep = sample_episode(d, classes, 7, 2, 3, rng);
    std::vector<int> used = ep.class_map;
    std::sort(used.begin(), used.end());
    CHECK(used == classes);
  }
  SUBCASE("replay with the same seed") {
    Rng a(3), b(3);
    CHECK(sample_episode(d, classes, 5, 1, 15, a).fingerprint() == sample_episode(d, classes, 5, 1, 15, b).fingerprint());
  }
  SUBCASE("insufficient classes or samples") {
    Rng rng(4);
    CHECK_THROWS_AS(sample_episode(d, classes, 8, 1, 1, rng), DatasetError);
    CHECK_THROWS_AS(sample_episode(d, classes, 5, 5, 16, rng), DatasetError);
  }
}

TEST_CASE("property: sampled episodes keep splits disjoint with exact counts") {
  Dataset d = synth_generate({.classes = 12, .per_class = 25, .sample_shape = {3}, .seed = 4});
  std::vector<int> classes(12);
  std::iota(classes.begin(), classes.end(), 0);
  Rng rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t way = 2 + rng.below(6), k_train = 1 + rng.below(5), k_test = 1 + rng.below(15);
    Episode ep = sample_episode(d, classes, way, k_train, k_test, rng);
    std::set<std::size_t> train(ep.train_indices.begin(), ep.train_indices.end());
    std::set<std::size_t> test(ep.test_indices.begin(), ep.test_indices.end());
    REQUIRE(train.size() == way * k_train);
    REQUIRE(test.size() == way * k_test);
    for (auto i : test) REQUIRE(!train.count(i));
    for (std::size_t i = 0; i < ep.train_indices.size(); ++i) {
      REQUIRE(d.label(ep.train_indices[i]) == ep.class_map[std::size_t(ep.train_labels[i])]);
    }
    for (std::size_t i = 0; i < ep.test_indices.size(); ++i) {
      REQUIRE(d.label(ep.test_indices[i]) == ep.class_map[std::size_t(ep.test_labels[i])]);
    }
  }
}

TEST_CASE("hard episodes") {
  Dataset d = synth_generate({.classes = 12, .per_class = 40, .sample_shape = {4}, .seed = 6});
  std::vector<int> classes(12);
  std::iota(classes.begin(), classes.end(), 0);
  auto entry = [&](int c, Rng& rng) {
    Episode probe = sample_episode(d, std::vector<int>{c}, 1, 1, 15, rng);
    return FailureEntry{c, probe.train_indices, probe.test_indices, 0};
  };

  SUBCASE("a full pool fixes the class set") {
    Rng rng(1);
    std::vector<FailureEntry> pool;
    for (int c : {2, 4, 6, 8, 10}) pool.push_back(entry(c, rng));
    Episode ep = sample_hard_episode(d, classes, pool, 5, 1, 15, HardMethod::Resample, rng);
    std::vector<int> used = ep.class_map;
    std::sort(used.begin(), used.end());
    CHECK(used == std::vector<int>{2, 4, 6, 8, 10});
    for (auto s : ep.provenance) CHECK(s == ClassSource::FailurePool);
  }

  SUBCASE("a small pool is padded with distinct partition classes") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      std::vector<FailureEntry> pool{entry(3, rng), entry(7, rng)};
      Episode ep = sample_hard_episode(d, classes, pool, 5, 1, 15, HardMethod::Resample, rng);
      REQUIRE(std::set<int>(ep.class_map.begin(), ep.class_map.end()).size() == 5);
      REQUIRE(std::count(ep.provenance.begin(), ep.provenance.end(), ClassSource::FailurePool) == 2);
      REQUIRE(std::count(ep.provenance.begin(), ep.provenance.end(), ClassSource::Padding) == 3);
      REQUIRE(std::count(ep.class_map.begin(), ep.class_map.end(), 3) == 1);
      REQUIRE(std::count(ep.class_map.begin(), ep.class_map.end(), 7) == 1);
    }
  }

  SUBCASE("resample draws beyond the failure-time samples, reuse stays inside them") {
    std::size_t fresh_resample = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed);
      FailureEntry e = entry(5, rng);
      std::set<std::size_t> recorded(e.train_indices.begin(), e.train_indices.end());
      recorded.insert(e.test_indices.begin(), e.test_indices.end());
      std::vector<FailureEntry> pool{e};
      Episode resampled = sample_hard_episode(d, classes, pool, 1, 1, 15, HardMethod::Resample, rng);
      fresh_resample += !recorded.count(resampled.train_indices[0]);
      Episode reused = sample_hard_episode(d, classes, pool, 1, 1, 15, HardMethod::Reuse, rng);
      REQUIRE(recorded.count(reused.train_indices[0]) == 1);
      REQUIRE(!std::count(reused.test_indices.begin(), reused.test_indices.end(), reused.train_indices[0]));
    }
    CHECK(fresh_resample > 20);
  }

  SUBCASE("reuse falls back when too few samples were recorded") {
    Rng rng(3);
    std::vector<FailureEntry> pool{FailureEntry{4, {d.class_samples(4)[0]}, {}, 0}};
    std::vector<std::string> notices;
    Episode ep = sample_hard_episode(d, classes, pool, 1, 2, 5, HardMethod::Reuse, rng, &notices);
    CHECK(ep.train_indices.size() == 2);
    REQUIRE(notices.size() == 1);
    CHECK(notices[0].find("class 4") != std::string::npos);
  }

  SUBCASE("repeated failures weigh proportionally") {
    Rng rng(8);
    std::vector<FailureEntry> pool{entry(1, rng), entry(1, rng), entry(1, rng), entry(9, rng)};
    std::map<int, int> hits;
    for (int t = 0; t < 4000; ++t) hits[sample_hard_episode(d, classes, pool, 1, 1, 1, HardMethod::Resample, rng).class_map[0]]++;
    CHECK(double(hits[1]) / 4000.0 == doctest::Approx(0.75).epsilon(0.05));
  }

  SUBCASE("empty pool is an error") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_hard_episode(d, classes, {}, 5, 1, 15, HardMethod::Resample, rng), DatasetError);
  }
}
