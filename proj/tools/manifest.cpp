#include "manifest.hpp"

#include <fstream>

#include "cxrinf/hashing.hpp"

namespace cxrinf::cli {

RunManifest::RunManifest(std::vector<std::string> argv)
    : argv_(std::move(argv)),
      started_(std::chrono::system_clock::now()),
      start_tick_(std::chrono::steady_clock::now()) {}

void RunManifest::add_input(const std::filesystem::path& p) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(p)) {
    inputs_[p.string()] = sha256_file(p);
  } else if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) inputs_[e.path().string()] = sha256_file(e.path());
    }
  }
}

void RunManifest::add_output(const std::filesystem::path& p) { outputs_.push_back(p.string()); }

nlohmann::json RunManifest::to_json() const {
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            start_tick_)
                      .count();
  const auto started = std::chrono::duration_cast<std::chrono::milliseconds>(
                           started_.time_since_epoch())
                           .count();
  return {{"schema_version", 1},
          {"tool_version", kToolVersion},
          {"command", command_},
          {"argv", argv_},
          {"config", config_},
          {"seeds", seeds_},
          {"inputs", inputs_},
          {"outputs", outputs_},
          {"started_unix_ms", started},
          {"wall_clock_ms", ms}};
}

void RunManifest::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << to_json().dump(2) << "\n";
}

}  // namespace cxrinf::cli
