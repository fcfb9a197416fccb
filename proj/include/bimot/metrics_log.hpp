#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bimot/errors.hpp"

namespace bimot {

/// Append-only CSV: the header is written once, when the file is created.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, const std::vector<std::string>& columns) : columns_(columns.size()) {
    if (path.empty()) return;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw ConfigError("cannot open metrics log " + path.string());
    if (fresh) write(columns);
  }

  bool enabled() const { return out_.is_open(); }

  void row(const std::vector<std::string>& cells) {
    if (!enabled()) return;
    if (cells.size() != columns_) throw ContractError("metrics row has the wrong number of cells");
    write(cells);
  }

 private:
  void write(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    out_.flush();
  }

  std::size_t columns_ = 0;
  std::ofstream out_;
};

}  // namespace bimot
