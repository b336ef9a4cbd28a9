// SPDX-License-Identifier: Apache-2.0
//
// ldke <subcommand> [--config FILE] [key=value ...]
//
// Exit status: 0 success, 1 runtime failure, 2 usage error, 3 bad input.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>

#include "ldke/config.hpp"
#include "ldke/errors.hpp"
#include "ldke/pipeline.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

struct SubcommandArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Localized multimodal knowledge editing on a toy transformer"};
  app.require_subcommand(0, 1);
  std::map<std::string, SubcommandArgs> args;
  for (const auto& name : ldke::subcommands()) {
    CLI::App* sub = app.add_subcommand(name);
    auto& a = args[name];
    sub->add_option("--config", a.config_path, "key = value configuration file");
    sub->add_option("overrides", a.overrides, "key=value overrides (win over the file)");
    sub->footer("Keys:\n" + ldke::config_help(name));
  }

  if (argc < 2) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return kExitUsage;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  const SubcommandArgs& a = args[name];
  try {
    std::optional<std::filesystem::path> path;
    if (!a.config_path.empty()) path = a.config_path;
    const ldke::RunConfig config = ldke::load_config(name, path, a.overrides);
    ldke::run_subcommand(config, std::cout);
  } catch (const ldke::UsageError& e) {
    std::cerr << "ldke " << name << ": usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ldke::DataError& e) {
    std::cerr << "ldke " << name << ": data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "ldke " << name << ": error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
