#pragma once

#include <tsrl/common.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace tsrl::harness {

/// Append-only JSONL metrics file, one record per logging interval.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : f_(path, std::ios::trunc) {
    if (!f_) throw ArgumentError("cannot write metrics file " + path.string());
  }

  void write(const nlohmann::json& record) {
    f_ << record.dump() << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
};

/// Parses a JSONL file; parse errors carry the 1-based line number.
inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ArgumentError("cannot open metrics file " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tsrl::harness
