#include "metashift/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace metashift {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};

template <typename T>
void put_raw(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(std::istream& in, std::string file) : in_(in), file_(std::move(file)) {}

  template <typename T>
  T take(const char* what) {
    T v;
    if (!in_.read(reinterpret_cast<char*>(&v), sizeof v)) fail(std::string("truncated ") + what);
    offset_ += sizeof v;
    return v;
  }

  std::string take_bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n && !in_.read(s.data(), std::streamsize(n))) fail(std::string("truncated ") + what);
    offset_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& detail) const {
    throw CheckpointError(file_ + ": " + detail + " at offset " + std::to_string(offset_));
  }

 private:
  std::istream& in_;
  std::string file_;
  std::size_t offset_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& value) {
  if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw CheckpointError("checkpoint entry name must be 1..65535 bytes");
  }
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
  if (it != entries_.end()) {
    it->value = value.detach();
  } else {
    entries_.push_back({name, value.detach()});
  }
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw CheckpointError("checkpoint has no entry \"" + name + "\"");
}

std::vector<Checkpoint::Entry> Checkpoint::with_prefix(const std::string& prefix) const {
  std::vector<Entry> out;
  for (const auto& e : entries_) {
    if (e.name.compare(0, prefix.size(), prefix) == 0) out.push_back(e);
  }
  return out;
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  std::vector<double> codes(text.begin(), text.end());
  put(name, Tensor::from({text.size()}, std::move(codes)));
}

std::string Checkpoint::get_text(const std::string& name) const {
  std::string text;
  for (auto v : get(name).data()) text.push_back(static_cast<char>(v));
  return text;
}

std::uint64_t Checkpoint::hash() const {
  std::vector<Tensor> values;
  std::string names;
  for (const auto& e : entries_) {
    values.push_back(e.value);
    names += e.name;
    names.push_back('\0');
  }
  std::vector<double> name_codes(names.begin(), names.end());
  values.push_back(Tensor::from({names.size()}, std::move(name_codes)));
  return hash_tensors(values);
}

void Checkpoint::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 4);
    put_raw<std::uint32_t>(out, std::uint32_t(entries_.size()));
    for (const auto& e : entries_) {
      put_raw<std::uint16_t>(out, std::uint16_t(e.name.size()));
      out.write(e.name.data(), std::streamsize(e.name.size()));
      put_raw<std::uint32_t>(out, std::uint32_t(e.value.rank()));
      for (auto d : e.value.shape()) put_raw<std::uint32_t>(out, std::uint32_t(d));
      for (auto v : e.value.data()) put_raw<double>(out, v);
    }
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

Checkpoint Checkpoint::load(const std::filesystem::path& file) {
  if (!std::filesystem::is_regular_file(file)) throw CheckpointError("checkpoint not found: " + file.string());
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file.string());
  Reader r(in, file.string());
  const std::string magic = r.take_bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) r.fail("bad magic (expected MTCK)");
  const auto count = r.take<std::uint32_t>("entry count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.take<std::uint16_t>("name length");
    std::string name = r.take_bytes(len, "name");
    const auto rank = r.take<std::uint32_t>("rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.take<std::uint32_t>("dimension"));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.take<double>("values");
    ck.put(name, Tensor::from(std::move(shape), std::move(values)));
  }
  return ck;
}

}  // namespace metashift
