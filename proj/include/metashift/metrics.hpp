#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

namespace metashift {

/// Append-only JSON-lines log. Every record carries `phase`, `iteration`
/// and `wall_clock` (seconds since the log was opened). A default-constructed
/// log discards records.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& file);

  bool enabled() const { return out_.is_open(); }
  void write(const std::string& phase, std::size_t iteration, nlohmann::json fields = nlohmann::json::object());
  std::size_t records() const { return records_; }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
  std::size_t records_ = 0;
};

}  // namespace metashift
