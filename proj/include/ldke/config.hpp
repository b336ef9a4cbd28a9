// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. Files hold `key = value` lines ('#' starts a comment);
// command-line `key=value` overrides win over the file. Each subcommand has
// a fixed key set with documented defaults; anything else is rejected.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ldke {

inline constexpr const char* kConfigVersion = "1";

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

// Throws UsageError for an unknown subcommand.
const std::vector<ConfigKey>& config_keys(const std::string& subcommand);
const std::vector<std::string>& subcommands();

class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(std::string subcommand);

  const std::string& subcommand() const { return subcommand_; }
  // Throws UnknownKey.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  // Resolved values in registry order, preceded by subcommand and version.
  std::vector<std::pair<std::string, std::string>> snapshot() const;

 private:
  std::string subcommand_;
  std::vector<std::pair<std::string, std::string>> values_;
};

// Parses `key = value` text. Throws ParseError on malformed lines and
// UnknownKey on keys outside the subcommand's set.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& source);

// Defaults, then the file (if given), then `key=value` overrides.
RunConfig load_config(const std::string& subcommand, const std::optional<std::filesystem::path>& path,
                      const std::vector<std::string>& overrides);

std::string config_help(const std::string& subcommand);

}  // namespace ldke
