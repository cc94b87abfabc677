#pragma once

// Run manifests: everything needed to re-execute a command, written before
// the command produces any output.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/train/config.hpp"

#ifndef AGMM_VERSION
#define AGMM_VERSION "0.1.0"
#endif

namespace agmm {

inline constexpr const char* kRunManifestName = "run_manifest.txt";

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// `key = value` lines: header fields, then `option.<name>` for command
/// flags, then `config.<key>` for every resolved config key.
struct RunManifest {
  std::string command;
  std::string tool_version = AGMM_VERSION;
  std::uint64_t seed = 0;
  std::string started;
  std::map<std::string, std::string> options;
  std::vector<std::string> outputs;
  TrainConfig config;
  bool has_config = true;

  std::string to_text() const {
    std::ostringstream os;
    os << "# agmm run manifest\n";
    os << "command = " << command << '\n';
    os << "tool.version = " << tool_version << '\n';
    os << "seed = " << seed << '\n';
    os << "started = " << started << '\n';
    for (const auto& o : outputs) os << "output = " << o << '\n';
    for (const auto& [k, v] : options) os << "option." << k << " = " << v << '\n';
    if (has_config) {
      std::istringstream cs(config_to_text(config));
      for (std::string line; std::getline(cs, line);)
        if (!line.empty()) os << "config." << line << '\n';
    }
    return os.str();
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / kRunManifestName, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write run manifest in " + dir.string());
    os << to_text();
    if (!os) throw std::runtime_error("failed writing run manifest in " + dir.string());
  }

  static RunManifest parse(const std::string& text, const std::string& source = "manifest") {
    RunManifest m;
    m.has_config = false;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      line = detail::trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
      const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
      if (key == "command") {
        m.command = value;
      } else if (key == "tool.version") {
        m.tool_version = value;
      } else if (key == "seed") {
        m.seed = detail::parse_number<std::uint64_t>(key, value);
      } else if (key == "started") {
        m.started = value;
      } else if (key == "output") {
        m.outputs.push_back(value);
      } else if (key.rfind("option.", 0) == 0) {
        m.options[key.substr(7)] = value;
      } else if (key.rfind("config.", 0) == 0) {
        try {
          set_config_value(m.config, key.substr(7), value);
        } catch (const ConfigError& e) {
          throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
        m.has_config = true;
      } else {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown manifest key: " + key);
      }
    }
    if (m.command.empty()) throw ConfigError(source + ": manifest has no command");
    return m;
  }

  static RunManifest read(const std::filesystem::path& path) {
    const auto file = std::filesystem::is_directory(path) ? path / kRunManifestName : path;
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read manifest " + file.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), file.string());
  }
};

}  // namespace agmm
