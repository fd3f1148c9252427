#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metashift/tensor.hpp"

namespace metashift {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Labeled samples of one fixed shape with class ids dense in [0, C).
/// Immutable after construction.
class Dataset {
 public:
  Dataset(Shape sample_shape, std::vector<std::vector<double>> features, std::vector<int> labels,
          std::vector<int> superclass_of = {});

  std::size_t size() const { return labels_.size(); }
  std::size_t num_classes() const { return class_index_.size(); }
  const Shape& sample_shape() const { return sample_shape_; }
  std::size_t sample_numel() const { return shape_numel(sample_shape_); }

  std::span<const double> features(std::size_t sample) const { return features_.at(sample); }
  int label(std::size_t sample) const { return labels_.at(sample); }
  const std::vector<std::size_t>& class_samples(int class_id) const { return class_index_.at(static_cast<std::size_t>(class_id)); }

  bool has_superclasses() const { return !superclass_of_.empty(); }
  /// -1 when no super-class metadata is attached.
  int superclass(int class_id) const;
  std::size_t num_superclasses() const;

  /// Throws naming the first class with fewer than `minimum` samples.
  void require_min_samples(std::size_t minimum) const;

  /// Stacks samples into [n, sample_shape...].
  Tensor batch(std::span<const std::size_t> indices) const;

 private:
  Shape sample_shape_;
  std::vector<std::vector<double>> features_;
  std::vector<int> labels_;
  std::vector<int> superclass_of_;
  std::vector<std::vector<std::size_t>> class_index_;
};

enum class DatasetFormat { TensorDir, PackedBinary };

DatasetFormat parse_dataset_format(const std::string& name);

/// `min_per_class` of 0 skips the sample-count check.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, std::size_t min_per_class = 0);

void write_tensor_dir(const Dataset& dataset, const std::filesystem::path& root);
void write_packed_binary(const Dataset& dataset, const std::filesystem::path& file);

/// Procedural stand-in for a benchmark. Rank-1 sample shapes give Gaussian
/// clouds around per-class mean vectors; rank-3 shapes [c,h,w] give
/// oriented-bar-plus-blob templates. With `superclasses` > 0, classes are
/// grouped so that classes of one super-class share part of their mean.
struct SynthSpec {
  std::size_t classes = 8;
  std::size_t per_class = 40;
  Shape sample_shape{16};
  double noise = 0.1;
  std::size_t superclasses = 0;
  /// Weight of the shared super-class component in each class mean.
  double superclass_share = 0.6;
  std::uint64_t seed = 7;
};

Dataset synth_generate(const SynthSpec& spec);

enum class SplitMode { ByClass, BySuperclass };

/// Class (or super-class) id lists for the meta-train/val/test partitions.
struct SplitSpec {
  SplitMode mode = SplitMode::ByClass;
  std::vector<int> train, val, test;
};

enum class Partition { Train, Val, Test };

/// Checks disjointness and coverage of the id space; throws DatasetError.
void validate_split(const SplitSpec& split, const Dataset& dataset);

/// Dataset class ids belonging to `which`, ascending.
std::vector<int> partition_classes(const Dataset& dataset, const SplitSpec& split, Partition which);

/// Consecutive id ranges of the given sizes, in train/val/test order.
SplitSpec contiguous_split(SplitMode mode, std::size_t train, std::size_t val, std::size_t test);

}  // namespace metashift
