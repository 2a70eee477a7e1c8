#pragma once

#include <istream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace cxrinf::cli {

inline constexpr int kConfigSchemaVersion = 1;

/// Reads {"schema_version": 1, "<subcommand>": {"<flag>": value, ...}}.
/// Values only fill options the command line left unset.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    return "{}";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError("config file is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object() || j.value("schema_version", 0) != kConfigSchemaVersion) {
      throw CLI::ConversionError("config file must be an object with schema_version " +
                                 std::to_string(kConfigSchemaVersion));
    }
    std::vector<CLI::ConfigItem> items;
    for (const auto& [section, body] : j.items()) {
      if (section == "schema_version") continue;
      if (body.is_object()) {
        for (const auto& [key, value] : body.items()) {
          items.push_back({{section}, key, inputs(value)});
        }
      } else {
        items.push_back({{}, section, inputs(body)});
      }
    }
    return items;
  }

 private:
  static std::vector<std::string> inputs(const nlohmann::json& v) {
    std::vector<std::string> out;
    if (v.is_array()) {
      for (const auto& e : v) out.push_back(scalar(e));
    } else {
      out.push_back(scalar(v));
    }
    return out;
  }

  static std::string scalar(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }
};

}  // namespace cxrinf::cli
