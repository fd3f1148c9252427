#include "metashift/metrics.hpp"

#include <stdexcept>

namespace metashift {

MetricsLog::MetricsLog(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  out_.open(file, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open metrics log " + file.string());
}

void MetricsLog::write(const std::string& phase, std::size_t iteration, nlohmann::json fields) {
  ++records_;
  if (!out_.is_open()) return;
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
  fields["phase"] = phase;
  fields["iteration"] = iteration;
  fields["wall_clock"] = elapsed.count();
  out_ << fields.dump() << '\n';
  out_.flush();
}

}  // namespace metashift
