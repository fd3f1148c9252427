#include "metashift/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include "metashift/rng.hpp"

namespace metashift {

namespace fs = std::filesystem;

Dataset::Dataset(Shape sample_shape, std::vector<std::vector<double>> features, std::vector<int> labels,
                 std::vector<int> superclass_of)
    : sample_shape_(std::move(sample_shape)),
      features_(std::move(features)),
      labels_(std::move(labels)),
      superclass_of_(std::move(superclass_of)) {
  if (features_.size() != labels_.size()) throw DatasetError("dataset: feature and label counts differ");
  const std::size_t numel = shape_numel(sample_shape_);
  int max_label = -1;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (features_[i].size() != numel) {
      throw DatasetError("dataset: sample " + std::to_string(i) + " has " + std::to_string(features_[i].size()) +
                         " values, expected " + std::to_string(numel) + " for shape " + shape_str(sample_shape_));
    }
    if (labels_[i] < 0) throw DatasetError("dataset: negative class id at sample " + std::to_string(i));
    max_label = std::max(max_label, labels_[i]);
  }
  if (max_label < 0) throw DatasetError("no classes found");
  class_index_.resize(static_cast<std::size_t>(max_label) + 1);
  for (std::size_t i = 0; i < labels_.size(); ++i) class_index_[static_cast<std::size_t>(labels_[i])].push_back(i);
  for (std::size_t c = 0; c < class_index_.size(); ++c) {
    if (class_index_[c].empty()) throw DatasetError("dataset: class ids not dense, class " + std::to_string(c) + " is empty");
  }
  if (!superclass_of_.empty() && superclass_of_.size() != class_index_.size()) {
    throw DatasetError("dataset: super-class table covers " + std::to_string(superclass_of_.size()) + " of " +
                       std::to_string(class_index_.size()) + " classes");
  }
}

int Dataset::superclass(int class_id) const {
  if (superclass_of_.empty()) return -1;
  return superclass_of_.at(static_cast<std::size_t>(class_id));
}

std::size_t Dataset::num_superclasses() const {
  if (superclass_of_.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(superclass_of_.begin(), superclass_of_.end())) + 1;
}

void Dataset::require_min_samples(std::size_t minimum) const {
  for (std::size_t c = 0; c < class_index_.size(); ++c) {
    if (class_index_[c].size() < minimum) {
      throw DatasetError("class " + std::to_string(c) + " has " + std::to_string(class_index_[c].size()) +
                         " samples, episodes need at least " + std::to_string(minimum));
    }
  }
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t numel = sample_numel();
  std::vector<double> values;
  values.reserve(indices.size() * numel);
  for (auto i : indices) {
    const auto& f = features_.at(i);
    values.insert(values.end(), f.begin(), f.end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  return Tensor::from(std::move(shape), std::move(values));
}

// --- binary formats -------------------------------------------------------

namespace {

constexpr std::array<char, 4> kSampleMagic{'M', 'T', 'S', 'R'};
constexpr std::array<char, 4> kPackedMagic{'M', 'T', 'P', 'K'};

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DatasetError(path.string() + ": cannot open");
  }

  void bytes(char* out, std::size_t n, const char* what) {
    in_.read(out, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail(std::string("truncated ") + what);
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4, what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  void magic(const std::array<char, 4>& expected) {
    const std::size_t at = offset_;
    char got[4];
    bytes(got, 4, "magic");
    if (std::memcmp(got, expected.data(), 4) != 0) {
      offset_ = at;
      fail("bad magic, expected \"" + std::string(expected.data(), 4) + "\"");
    }
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw DatasetError(path_.string() + " at offset " + std::to_string(offset_) + ": " + what);
  }

  std::size_t offset() const { return offset_; }

 private:
  fs::path path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

struct RawSample {
  Shape shape;
  std::vector<double> values;
};

RawSample read_sample(Reader& r) {
  r.magic(kSampleMagic);
  const std::uint32_t rank = r.u32("rank");
  if (rank == 0 || rank > 8) r.fail("unsupported rank " + std::to_string(rank));
  RawSample s;
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = r.u32("dimension");
    if (d == 0) r.fail("zero-sized dimension");
    s.shape.push_back(d);
    numel *= d;
    if (numel > (std::size_t{1} << 28)) r.fail("sample too large");
  }
  s.values.resize(numel);
  for (auto& v : s.values) v = r.f32("sample values");
  return s;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  out.write(b, 4);
}

void put_sample(std::ostream& out, const Shape& shape, std::span<const double> values) {
  out.write(kSampleMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
  }
}

struct Accumulator {
  std::optional<Shape> shape;
  std::vector<std::vector<double>> features;
  std::vector<int> labels;

  void add(RawSample s, int label, const Reader& r) {
    if (!shape) shape = s.shape;
    if (*shape != s.shape) r.fail("sample shape " + shape_str(s.shape) + " differs from " + shape_str(*shape));
    features.push_back(std::move(s.values));
    labels.push_back(label);
  }
};

Dataset load_tensor_dir(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) throw DatasetError("no classes found in " + root.string());
  std::sort(class_dirs.begin(), class_dirs.end());

  Accumulator acc;
  std::vector<int> superclass_of;
  bool any_superclass = false;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    int superclass = -1;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (!entry.is_regular_file()) continue;
      if (entry.path().filename() == "superclass.txt") {
        std::ifstream in(entry.path());
        if (!(in >> superclass) || superclass < 0) {
          throw DatasetError(entry.path().string() + ": expected a non-negative super-class id");
        }
        any_superclass = true;
        continue;
      }
      files.push_back(entry.path());
    }
    if (files.empty()) throw DatasetError("class directory " + class_dirs[c].string() + " holds no samples");
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      Reader r(file);
      RawSample s = read_sample(r);
      if (!r.at_end()) r.fail("trailing bytes after sample");
      acc.add(std::move(s), static_cast<int>(c), r);
    }
    superclass_of.push_back(superclass);
  }
  if (any_superclass) {
    for (std::size_t c = 0; c < superclass_of.size(); ++c) {
      if (superclass_of[c] < 0) throw DatasetError(class_dirs[c].string() + ": missing superclass.txt");
    }
  } else {
    superclass_of.clear();
  }
  return Dataset(*acc.shape, std::move(acc.features), std::move(acc.labels), std::move(superclass_of));
}

Dataset load_packed(const fs::path& file) {
  Reader r(file);
  r.magic(kPackedMagic);
  const std::uint32_t classes = r.u32("class count");
  if (classes == 0) throw DatasetError("no classes found in " + file.string());
  Accumulator acc;
  std::set<std::uint32_t> seen;
  for (std::uint32_t c = 0; c < classes; ++c) {
    const std::size_t at = r.offset();
    const std::uint32_t id = r.u32("class id");
    if (id >= classes) r.fail("class id " + std::to_string(id) + " outside [0," + std::to_string(classes) + ") at offset " + std::to_string(at));
    if (!seen.insert(id).second) r.fail("duplicate class id " + std::to_string(id));
    const std::uint32_t count = r.u32("sample count");
    if (count == 0) r.fail("class " + std::to_string(id) + " holds no samples");
    for (std::uint32_t k = 0; k < count; ++k) acc.add(read_sample(r), static_cast<int>(id), r);
  }
  if (!r.at_end()) r.fail("trailing bytes after last class");
  return Dataset(*acc.shape, std::move(acc.features), std::move(acc.labels));
}

}  // namespace

DatasetFormat parse_dataset_format(const std::string& name) {
  if (name == "tensor-dir") return DatasetFormat::TensorDir;
  if (name == "packed-binary") return DatasetFormat::PackedBinary;
  throw DatasetError("unknown dataset format \"" + name + "\" (expected tensor-dir or packed-binary)");
}

Dataset load_dataset(const fs::path& path, DatasetFormat format, std::size_t min_per_class) {
  if (!fs::exists(path)) throw DatasetError(path.string() + ": no such file or directory");
  Dataset d = format == DatasetFormat::TensorDir ? load_tensor_dir(path) : load_packed(path);
  if (min_per_class > 0) d.require_min_samples(min_per_class);
  return d;
}

void write_tensor_dir(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  for (std::size_t c = 0; c < dataset.num_classes(); ++c) {
    std::ostringstream name;
    name << "class_" << std::setw(5) << std::setfill('0') << c;
    const fs::path dir = root / name.str();
    fs::create_directories(dir);
    if (dataset.has_superclasses()) {
      std::ofstream(dir / "superclass.txt") << dataset.superclass(static_cast<int>(c)) << '\n';
    }
    const auto& samples = dataset.class_samples(static_cast<int>(c));
    for (std::size_t k = 0; k < samples.size(); ++k) {
      std::ostringstream file;
      file << "sample_" << std::setw(6) << std::setfill('0') << k << ".mtsr";
      std::ofstream out(dir / file.str(), std::ios::binary);
      put_sample(out, dataset.sample_shape(), dataset.features(samples[k]));
      if (!out) throw DatasetError((dir / file.str()).string() + ": write failed");
    }
  }
}

void write_packed_binary(const Dataset& dataset, const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DatasetError(file.string() + ": cannot open for writing");
  out.write(kPackedMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(dataset.num_classes()));
  for (std::size_t c = 0; c < dataset.num_classes(); ++c) {
    const auto& samples = dataset.class_samples(static_cast<int>(c));
    put_u32(out, static_cast<std::uint32_t>(c));
    put_u32(out, static_cast<std::uint32_t>(samples.size()));
    for (auto i : samples) put_sample(out, dataset.sample_shape(), dataset.features(i));
  }
  if (!out) throw DatasetError(file.string() + ": write failed");
}

// --- synthetic data -------------------------------------------------------

namespace {

std::vector<double> gaussian(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

struct ImageTemplate {
  double angle, offset, blob_y, blob_x;
  std::vector<double> channel_gain;
};

std::vector<double> render(const ImageTemplate& t, const Shape& shape) {
  const std::size_t ch = shape[0], h = shape[1], w = shape[2];
  std::vector<double> out(ch * h * w);
  const double cy = 0.5 * double(h - 1), cx = 0.5 * double(w - 1);
  const double nx = std::cos(t.angle), ny = std::sin(t.angle);
  const double bar_sigma = 0.08 * double(std::max(h, w));
  const double blob_sigma = 0.12 * double(std::max(h, w));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // signed distance to the bar's center line
      const double dist = (double(x) - cx) * ny - (double(y) - cy) * nx - t.offset;
      const double bar = std::exp(-dist * dist / (2.0 * bar_sigma * bar_sigma));
      const double by = double(y) - t.blob_y, bx = double(x) - t.blob_x;
      const double blob = 0.8 * std::exp(-(by * by + bx * bx) / (2.0 * blob_sigma * blob_sigma));
      for (std::size_t c = 0; c < ch; ++c) out[(c * h + y) * w + x] = t.channel_gain[c] * (bar + blob);
    }
  }
  return out;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  if (spec.classes < 2) throw DatasetError("synth_generate: need at least 2 classes");
  if (spec.per_class < 2) throw DatasetError("synth_generate: need at least 2 samples per class");
  if (spec.sample_shape.size() != 1 && spec.sample_shape.size() != 3) {
    throw DatasetError("synth_generate: sample shape must be [dims] or [channels,height,width], got " +
                       shape_str(spec.sample_shape));
  }
  if (spec.superclasses > spec.classes) throw DatasetError("synth_generate: more super-classes than classes");
  Rng rng(spec.seed);
  const std::size_t numel = shape_numel(spec.sample_shape);
  std::vector<int> superclass_of;
  if (spec.superclasses > 0) {
    for (std::size_t c = 0; c < spec.classes; ++c) superclass_of.push_back(static_cast<int>(c * spec.superclasses / spec.classes));
  }

  std::vector<std::vector<double>> means(spec.classes);
  if (spec.sample_shape.size() == 1) {
    std::vector<std::vector<double>> shared;
    for (std::size_t s = 0; s < spec.superclasses; ++s) shared.push_back(gaussian(rng, numel));
    const double own = spec.superclasses > 0 ? std::sqrt(1.0 - spec.superclass_share * spec.superclass_share) : 1.0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      means[c] = gaussian(rng, numel);
      for (auto& v : means[c]) v *= own;
      if (spec.superclasses > 0) {
        const auto& base = shared[static_cast<std::size_t>(superclass_of[c])];
        for (std::size_t i = 0; i < numel; ++i) means[c][i] += spec.superclass_share * base[i];
      }
    }
  } else {
    const double h = double(spec.sample_shape[1]), w = double(spec.sample_shape[2]);
    const std::size_t groups = spec.superclasses > 0 ? spec.superclasses : spec.classes;
    std::vector<double> group_angle(groups);
    for (std::size_t g = 0; g < groups; ++g) group_angle[g] = std::numbers::pi * (double(g) + 0.25 * rng.uniform()) / double(groups);
    for (std::size_t c = 0; c < spec.classes; ++c) {
      ImageTemplate t;
      const std::size_t g = spec.superclasses > 0 ? static_cast<std::size_t>(superclass_of[c]) : c;
      t.angle = group_angle[g] + (spec.superclasses > 0 ? 0.15 * rng.normal() : 0.0);
      t.offset = rng.uniform(-0.25, 0.25) * std::min(h, w);
      t.blob_y = rng.uniform(0.15, 0.85) * (h - 1);
      t.blob_x = rng.uniform(0.15, 0.85) * (w - 1);
      for (std::size_t ch = 0; ch < spec.sample_shape[0]; ++ch) t.channel_gain.push_back(rng.uniform(0.5, 1.0));
      means[c] = render(t, spec.sample_shape);
    }
  }

  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  features.reserve(spec.classes * spec.per_class);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      std::vector<double> x = means[c];
      if (spec.noise != 0.0) {
        for (auto& v : x) v += spec.noise * rng.normal();
      }
      features.push_back(std::move(x));
      labels.push_back(static_cast<int>(c));
    }
  }
  return Dataset(spec.sample_shape, std::move(features), std::move(labels), std::move(superclass_of));
}

// --- splits ---------------------------------------------------------------

void validate_split(const SplitSpec& split, const Dataset& dataset) {
  const bool by_super = split.mode == SplitMode::BySuperclass;
  if (by_super && !dataset.has_superclasses()) {
    throw DatasetError("split: by-superclass mode but the dataset carries no super-class labels");
  }
  const std::size_t space = by_super ? dataset.num_superclasses() : dataset.num_classes();
  const char* unit = by_super ? "super-class" : "class";
  std::vector<int> owner(space, -1);
  const std::array<const std::vector<int>*, 3> lists{&split.train, &split.val, &split.test};
  const std::array<const char*, 3> names{"train", "val", "test"};
  for (std::size_t l = 0; l < 3; ++l) {
    for (int id : *lists[l]) {
      if (id < 0 || static_cast<std::size_t>(id) >= space) {
        throw DatasetError(std::string("split: ") + unit + " id " + std::to_string(id) + " in " + names[l] +
                           " outside [0," + std::to_string(space) + ")");
      }
      auto& slot = owner[static_cast<std::size_t>(id)];
      if (slot >= 0) {
        throw DatasetError(std::string("split: ") + unit + " " + std::to_string(id) + " listed in both " + names[slot] +
                           " and " + names[l]);
      }
      slot = static_cast<int>(l);
    }
  }
  for (std::size_t id = 0; id < space; ++id) {
    if (owner[id] < 0) throw DatasetError(std::string("split: ") + unit + " " + std::to_string(id) + " not assigned");
  }
}

std::vector<int> partition_classes(const Dataset& dataset, const SplitSpec& split, Partition which) {
  const std::vector<int>& ids = which == Partition::Train ? split.train : which == Partition::Val ? split.val : split.test;
  std::vector<int> classes;
  if (split.mode == SplitMode::ByClass) {
    classes = ids;
  } else {
    std::set<int> wanted(ids.begin(), ids.end());
    for (std::size_t c = 0; c < dataset.num_classes(); ++c) {
      if (wanted.count(dataset.superclass(static_cast<int>(c)))) classes.push_back(static_cast<int>(c));
    }
  }
  std::sort(classes.begin(), classes.end());
  return classes;
}

SplitSpec contiguous_split(SplitMode mode, std::size_t train, std::size_t val, std::size_t test) {
  SplitSpec s;
  s.mode = mode;
  int next = 0;
  for (std::size_t i = 0; i < train; ++i) s.train.push_back(next++);
  for (std::size_t i = 0; i < val; ++i) s.val.push_back(next++);
  for (std::size_t i = 0; i < test; ++i) s.test.push_back(next++);
  return s;
}

}  // namespace metashift
