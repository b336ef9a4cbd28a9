// SPDX-License-Identifier: Apache-2.0

#include "ldke/config.hpp"

#include <map>
#include <sstream>

#include "ldke/container.hpp"
#include "ldke/errors.hpp"

namespace ldke {

namespace {

using Keys = std::vector<ConfigKey>;

Keys concat(std::initializer_list<Keys> parts) {
  Keys out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

const Keys kSeed = {{"seed", "1", "global seed; per-component seeds are derived from it"}};
const Keys kData = {{"data", "bench.tsv", "dataset file"}};
const Keys kModel = {{"model", "model.ckpt", "host model checkpoint"}};
const Keys kEditor = {{"editor", "editor.ckpt", "editor checkpoint"}};
const Keys kRouter = {{"router", "router.ckpt", "router checkpoint"}};
const Keys kK = {{"k", "3", "number of edited layers"}};
const Keys kHeld = {{"eval_from", "400", "index of the first held-out bundle"},
                    {"eval_count", "100", "number of held-out bundles (-1: all remaining)"}};
const Keys kTrainSplit = {{"train_bundles", "400", "bundles [0, n) are used for training"}};

const std::map<std::string, Keys>& registry() {
  static const std::map<std::string, Keys> r = {
      {"gen-data", concat({kSeed,
                           {{"n_scenes", "500", "number of scenes (one edit bundle each)"},
                            {"out", "bench.tsv", "dataset output path"},
                            {"vocab_out", "vocab.txt", "vocabulary table output path"}}})},
      {"pretrain", concat({kSeed, kData,
                           {{"out", "model.ckpt", "checkpoint output path"},
                            {"log", "pretrain_log.csv", "loss log output path"},
                            {"num_layers", "8", ""},
                            {"hidden_dim", "64", ""},
                            {"ffn_dim", "256", ""},
                            {"vocab_size", "256", ""},
                            {"num_heads", "4", ""},
                            {"max_seq_len", "16", ""},
                            {"steps", "12000", "step budget"},
                            {"batch_size", "16", ""},
                            {"lr", "0.001", "peak learning rate"},
                            {"warmup_steps", "100", ""},
                            {"target_accuracy", "0.99", "required exact-match accuracy on the pool"},
                            {"require_target", "1", "0: write the checkpoint even if the target is missed"},
                            {"eval_every", "500", ""}}})},
      {"train-editor", concat({kSeed, kData, kModel, kK, kTrainSplit,
                               {{"out", "editor.ckpt", "checkpoint output path"},
                                {"log", "editor_loss.csv", "loss log output path"},
                                {"lambda_gen", "1", ""},
                                {"lambda_loc", "1", ""},
                                {"lambda_m_gen", "1", ""},
                                {"lambda_m_loc", "1", ""},
                                {"rank", "0", "0: ceil(min(d, d + d_ff) / 8)"},
                                {"lr", "0.001", ""},
                                {"steps", "3000", ""},
                                {"batch_size", "4", ""},
                                {"initial_eta", "0.01", "initial per-layer step size"}}})},
      {"train-router", concat({kSeed, kData, kModel, kK, kTrainSplit,
                               {{"out", "router.ckpt", "checkpoint output path"},
                                {"log", "router_loss.csv", "loss log output path"},
                                {"margin", "0.2", ""},
                                {"lambda1", "1", ""},
                                {"lambda2", "1", ""},
                                {"lambda3", "1", ""},
                                {"lr", "0.001", ""},
                                {"steps", "2000", ""},
                                {"batch_size", "8", ""},
                                {"d_r", "0", "0: hidden_dim"},
                                {"d_e", "0", "0: hidden_dim / 2"}}})},
      {"localize", concat({kSeed, kData, kModel, kK,
                           {{"record", "0", "bundle id"}, {"out", "", "report path (empty: stdout)"}}})},
      {"edit", concat({kSeed, kData, kModel, kEditor, kRouter, kK,
                       {{"record", "0", "bundle id"}, {"out", "package.ckpt", "edit package output path"}}})},
      {"route", concat({kSeed, kData, kModel, kRouter,
                        {{"package", "package.ckpt", "edit package"},
                         {"record", "0", "bundle id holding the query"},
                         {"query", "edit", "edit | rephrases:i | fg_gen:i | fg_loc:i | t_loc:i | port:i"}}})},
      {"eval", concat({kSeed, kData, kModel, kEditor, kRouter, kK, kHeld,
                       {{"out", "eval.csv", "per-bundle report"}, {"table_out", "eval_table.txt", "text table"}}})},
      {"ablate-sim", concat({kSeed, kData, kModel, kRouter, kK, kHeld, {{"out", "ablate_sim.csv", ""}}})},
      {"ablate-layers", concat({kSeed, kData, kModel, kEditor, kRouter, kK, kHeld,
                                {{"out", "ablate_layers.csv", ""}, {"table_out", "ablate_layers.txt", ""}}})},
      {"seq-edit", concat({kSeed, kData, kModel, kEditor, kRouter, kK,
                           {{"eval_from", "400", "index of the first bundle to edit"},
                            {"n_edits", "10", "number of sequential edits"},
                            {"out", "seq_edit.csv", ""}}})},
      {"forward-cost", concat({kSeed, kData, kModel, kK, kHeld, {{"out", "forward_cost.csv", ""}}})},
  };
  return r;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys(const std::string& subcommand) {
  const auto& r = registry();
  auto it = r.find(subcommand);
  if (it == r.end()) throw UsageError("unknown subcommand '" + subcommand + "'");
  return it->second;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s = {"gen-data", "pretrain", "train-editor", "train-router",
                                             "localize", "edit",     "route",        "eval",
                                             "ablate-sim", "ablate-layers", "seq-edit", "forward-cost"};
  return s;
}

RunConfig::RunConfig(std::string subcommand) : subcommand_(std::move(subcommand)) {
  for (const auto& k : config_keys(subcommand_)) values_.emplace_back(k.name, k.default_value);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : values_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  throw UnknownKey("unknown config key '" + key + "' for subcommand " + subcommand_);
}

const std::string& RunConfig::get(const std::string& key) const {
  for (const auto& [k, v] : values_)
    if (k == key) return v;
  throw UnknownKey("unknown config key '" + key + "' for subcommand " + subcommand_);
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "' expects an integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos == v.size() && v.front() != '-') return out;
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::snapshot() const {
  std::vector<std::pair<std::string, std::string>> s = {{"config_version", kConfigVersion},
                                                         {"subcommand", subcommand_}};
  s.insert(s.end(), values_.begin(), values_.end());
  return s;
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(source + ":" + std::to_string(line_no) + ": empty key");
    config.set(key, trim(line.substr(eq + 1)));
  }
}

RunConfig load_config(const std::string& subcommand, const std::optional<std::filesystem::path>& path,
                      const std::vector<std::string>& overrides) {
  RunConfig c(subcommand);
  if (path) apply_config_text(c, read_file(*path), path->string());
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override '" + o + "' is not of the form key=value");
    c.set(o.substr(0, eq), o.substr(eq + 1));
  }
  return c;
}

std::string config_help(const std::string& subcommand) {
  std::string s;
  for (const auto& k : config_keys(subcommand)) {
    s += "  " + k.name + " = " + (k.default_value.empty() ? "\"\"" : k.default_value);
    if (!k.help.empty()) s += "    " + k.help;
    s += "\n";
  }
  return s;
}

}  // namespace ldke
