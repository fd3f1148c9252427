#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "metashift/tensor.hpp"

namespace metashift {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered named tensors. Binary layout: "MTCK", u32 entry count, then per
/// entry u16 name length, name bytes, u32 rank, u32 dims, f64 values, all
/// little-endian.
class Checkpoint {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  /// Replaces an existing entry of the same name.
  void put(const std::string& name, const Tensor& value);
  bool has(const std::string& name) const;
  /// Throws CheckpointError naming the missing entry.
  const Tensor& get(const std::string& name) const;
  /// Entries whose names start with `prefix`, in insertion order.
  std::vector<Entry> with_prefix(const std::string& prefix) const;
  const std::vector<Entry>& entries() const { return entries_; }

  void put_text(const std::string& name, const std::string& text);
  std::string get_text(const std::string& name) const;

  /// Hash over names, shapes and values.
  std::uint64_t hash() const;

  void save(const std::filesystem::path& file) const;
  /// Throws CheckpointError("checkpoint not found: ...") for a missing file.
  static Checkpoint load(const std::filesystem::path& file);

 private:
  std::vector<Entry> entries_;
};

}  // namespace metashift
