#pragma once

#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "manifest.hpp"

namespace cxrinf::cli {

struct Globals {
  std::string data_dir;
  std::string manifest_path;
};

struct Command {
  CLI::App* app = nullptr;
  std::function<void(RunManifest&)> run;
};

std::vector<Command> register_commands(CLI::App& app, Globals& globals);

}  // namespace cxrinf::cli
