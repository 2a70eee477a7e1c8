#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "cxrinf/dataset.hpp"
#include "commands.hpp"
#include "json_config.hpp"
#include "manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Effective option values of the selected subcommand, in config-file form.
json config_snapshot(const CLI::App* sub) {
  json section = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->count() > 0) {
      const std::vector<std::string>& r = opt->results();
      if (opt->get_expected_max() > 1) {
        section[name] = r;
      } else if (opt->get_type_size() == 0) {
        section[name] = opt->as<bool>();
      } else {
        section[name] = r.back();
      }
    } else if (!opt->get_default_str().empty()) {
      section[name] = opt->get_default_str();
    }
  }
  return json{{"schema_version", cxrinf::cli::kConfigSchemaVersion}, {sub->get_name(), section}};
}

int run(std::vector<std::string> args);

// Re-run a recorded invocation from its manifest's config snapshot.
int replay(const fs::path& manifest_path, const std::string& manifest_out) {
  std::ifstream in(manifest_path);
  if (!in) throw cxrinf::ValidationError("cannot read manifest " + manifest_path.string());
  const json m = json::parse(in);
  const std::string command = m.at("command").get<std::string>();
  if (command == "replay") throw cxrinf::ValidationError("cannot replay a replay");
  const fs::path cfg = fs::temp_directory_path() /
                       ("cxrinf-replay-" + std::to_string(::getpid()) + ".json");
  {
    std::ofstream out(cfg);
    out << m.at("config").dump(2);
  }
  std::vector<std::string> args = {"cxrinf", "--config", cfg.string()};
  if (!manifest_out.empty()) {
    args.push_back("--manifest");
    args.push_back(manifest_out);
  }
  args.push_back(command);
  const int rc = run(args);
  fs::remove(cfg);
  return rc;
}

int run(std::vector<std::string> args) {
  CLI::App app("Chest X-ray infection mapping toolkit", "cxrinf");
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.config_formatter(std::make_shared<cxrinf::cli::JsonConfig>());
  app.set_config("--config", "", "Versioned JSON config; flags override its values");
  app.set_version_flag("--version", cxrinf::cli::kToolVersion);

  cxrinf::cli::Globals globals;
  app.add_option("--data-dir", globals.data_dir, "Store root for manifests")
      ->envname("CXRINF_DATA_DIR");
  app.add_option("--manifest", globals.manifest_path,
                 "Manifest path (default <data-dir>/manifests/<command>.manifest.json)");

  std::vector<cxrinf::cli::Command> commands = cxrinf::cli::register_commands(app, globals);

  std::string replay_manifest;
  CLI::App* replay_cmd = app.add_subcommand("replay", "Re-run a command from its manifest");
  replay_cmd->add_option("manifest", replay_manifest, "Manifest JSON")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return kExitValidation;
  }

  try {
    if (replay_cmd->parsed()) return replay(replay_manifest, globals.manifest_path);
    for (const auto& cmd : commands) {
      if (!cmd.app->parsed()) continue;
      cxrinf::cli::RunManifest manifest(args);
      manifest.set_command(cmd.app->get_name());
      manifest.set_config(config_snapshot(cmd.app));
      cmd.run(manifest);
      fs::path path = globals.manifest_path;
      if (path.empty()) {
        const fs::path root = globals.data_dir.empty() ? fs::path(".") : fs::path(globals.data_dir);
        path = root / "manifests" / (cmd.app->get_name() + ".manifest.json");
      }
      manifest.write(path);
      return kExitOk;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
