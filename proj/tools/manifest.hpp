#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace cxrinf::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Record of one command invocation: enough to re-run it and check that the
/// primary outputs come out the same.
class RunManifest {
 public:
  explicit RunManifest(std::vector<std::string> argv);

  void set_command(std::string c) { command_ = std::move(c); }
  void set_config(nlohmann::json c) { config_ = std::move(c); }
  void add_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  /// Hashes a file, or every regular file below a directory.
  void add_input(const std::filesystem::path& p);
  void add_output(const std::filesystem::path& p);

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> argv_;
  std::string command_;
  nlohmann::json config_ = nlohmann::json::object();
  std::map<std::string, std::uint64_t> seeds_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  std::chrono::system_clock::time_point started_;
  std::chrono::steady_clock::time_point start_tick_;
};

}  // namespace cxrinf::cli
