#pragma once
//! \file
//! \brief Run reports, config hashing and CSV output shared by the CLI and
//! the acceptance runner.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"

namespace bml {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

/// 17 significant digits: doubles round-trip through text.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string config_hash(const nlohmann::json& config) {
  return hex64(fnv1a(config.dump()));
}

struct Check {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct RunReport {
  std::string experiment;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 1;
  std::vector<Check> checks;
  nlohmann::json constants = nlohmann::json::object();
  double seconds = 0.0;

  void check(std::string name, bool passed, double value = 0.0, double threshold = 0.0,
             std::string detail = {}) {
    checks.push_back({std::move(name), passed, value, threshold, std::move(detail)});
  }
  bool passed() const {
    for (auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
  std::string hash() const { return config_hash(config); }

  /// Everything except the "timing" object is a function of config and seed.
  nlohmann::json to_json() const {
    nlohmann::json cs = nlohmann::json::array();
    for (auto& c : checks)
      cs.push_back({{"name", c.name},
                    {"passed", c.passed},
                    {"value", c.value},
                    {"threshold", c.threshold},
                    {"detail", c.detail}});
    return {{"schema_version", kSchemaVersion},
            {"version", kVersion},
            {"experiment", experiment},
            {"config", config},
            {"config_hash", hash()},
            {"seed", seed},
            {"checks", cs},
            {"passed", passed()},
            {"constants", constants},
            {"timing", {{"seconds", seconds}}}};
  }
};

// ---------------------------------------------------------------------------
// CSV

/// First line "# config_hash=<hash>", then the header, then the rows.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header,
            const std::string& hash)
      : out_(path) {
    if (!out_) throw Error("cannot write " + path);
    out_ << "# config_hash=" << hash << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }
  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_double(values[i]);
    out_ << "\n";
  }

 private:
  std::ofstream out_;
};

struct CsvTable {
  std::string config_hash;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path);
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(in, line)) {
    if (line.rfind("# config_hash=", 0) == 0) {
      t.config_hash = line.substr(14);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    std::vector<double> r;
    for (auto& c : split(line)) r.push_back(std::stod(c));
    t.rows.push_back(std::move(r));
  }
  return t;
}

}  // namespace bml
