// SPDX-License-Identifier: Apache-2.0
//
// Container, vocabulary and config file handling.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "ldke/config.hpp"
#include "ldke/container.hpp"
#include "ldke/errors.hpp"
#include "ldke/rng.hpp"
#include "ldke/synth_data.hpp"
#include "ldke/vocab.hpp"

using namespace ldke;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ldke_test_" + name);
}

}  // namespace

TEST(Container, RoundTripIsBitExact) {
  Container c;
  c.kind = "model";
  c.set("alpha", "1");
  c.set("name", "x y");
  Rng rng(3);
  Matrix m(5, 7);
  for (auto& v : m.data) v = static_cast<double>(static_cast<float>(rng.normal()));
  m(0, 0) = -0.0;
  m(1, 1) = std::numeric_limits<float>::denorm_min();
  c.add("w", m);
  c.add("empty", Matrix(0, 3));
  const auto path = temp_path("container.ckpt");
  write_container(path, c);
  const Container back = read_container(path);
  EXPECT_EQ(back.kind, "model");
  EXPECT_EQ(back.get("alpha"), "1");
  EXPECT_EQ(back.get("name"), "x y");
  EXPECT_EQ(back.tensor("w"), m);
  EXPECT_TRUE(std::signbit(back.tensor("w")(0, 0)));
  EXPECT_EQ(back.tensor("empty").rows, 0);
  EXPECT_EQ(serialize_container(back), serialize_container(c));
  std::filesystem::remove(path);
}

TEST(Container, Errors) {
  EXPECT_THROW(parse_container("nonsense\n"), ParseError);
  Container c;
  c.kind = "model";
  c.add("w", Matrix(4, 4, 1.0));
  std::string bytes = serialize_container(c);
  EXPECT_THROW(parse_container(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(c.get("missing"), DataError);
  EXPECT_THROW(c.tensor("missing"), DataError);
  EXPECT_THROW(read_container(temp_path("does_not_exist.ckpt")), DataError);
}

TEST(Container, MissingFileNamesThePath) {
  const auto path = temp_path("absent_dir/none.ckpt");
  try {
    read_file(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
}

TEST(Vocab, TokenizeMatchesTableAndRoundTrips) {
  const Vocabulary v = synth::make_vocabulary();
  const std::string text = "what color is the cube";
  const TokenIds ids = v.tokenize(text);
  ASSERT_EQ(ids.size(), 5u);
  const Vocabulary table = Vocabulary::from_table(v.to_table());
  std::istringstream in(text);
  std::string w;
  for (int id : ids) {
    in >> w;
    EXPECT_EQ(table.word(id), w);
  }
  EXPECT_EQ(v.detokenize(ids), text);
  EXPECT_TRUE(v.tokenize("").empty());
  EXPECT_THROW(v.tokenize("what colour is the cube"), UnknownToken);
}

TEST(Vocab, TableFormat) {
  const Vocabulary v = synth::make_vocabulary();
  const std::string table = v.to_table();
  EXPECT_EQ(table.rfind("LDKE-VOCAB 1 size=" + std::to_string(v.size()) + "\n", 0), 0u);
  EXPECT_NE(table.find("0\t<pad>\n1\t<eoa>\n"), std::string::npos);
  EXPECT_EQ(Vocabulary::from_table(table + "# seed=1\n"), v);
  EXPECT_THROW(Vocabulary::from_table("LDKE-VOCAB 1 size=3\n0\t<pad>\n1\t<eoa>\n"), ParseError);
  EXPECT_THROW(Vocabulary::from_table(table + "extra\n"), ParseError);
}

TEST(Config, EmptyFileGivesDefaults) {
  const auto path = temp_path("empty.cfg");
  write_file_atomic(path, "");
  const RunConfig c = load_config("train-editor", path, {});
  for (const auto& key : config_keys("train-editor")) EXPECT_EQ(c.get(key.name), key.default_value) << key.name;
  std::filesystem::remove(path);
}

TEST(Config, OverrideBeatsFile) {
  const auto path = temp_path("k.cfg");
  write_file_atomic(path, "# comment\nk = 2\nlambda_gen = 0.5\n");
  const RunConfig c = load_config("train-editor", path, {"k=4"});
  EXPECT_EQ(c.get_int("k"), 4);
  EXPECT_DOUBLE_EQ(c.get_double("lambda_gen"), 0.5);
  std::filesystem::remove(path);
}

TEST(Config, UnknownKeyIsRejectedByName) {
  const auto path = temp_path("typo.cfg");
  write_file_atomic(path, "lamda_gen = 1\n");
  try {
    load_config("train-editor", path, {});
    FAIL() << "expected UnknownKey";
  } catch (const UnknownKey& e) {
    EXPECT_NE(std::string(e.what()).find("lamda_gen"), std::string::npos);
  }
  EXPECT_THROW(load_config("train-editor", std::nullopt, {"lamda_gen=1"}), UnknownKey);
  std::filesystem::remove(path);
}

TEST(Config, MalformedInput) {
  RunConfig c("eval");
  EXPECT_THROW(apply_config_text(c, "just words\n", "x.cfg"), ParseError);
  EXPECT_THROW(load_config("eval", std::nullopt, {"noequals"}), UsageError);
  EXPECT_THROW(load_config("no-such-command", std::nullopt, {}), UsageError);
  RunConfig e = load_config("eval", std::nullopt, {"k=abc"});
  EXPECT_THROW(e.get_int("k"), UsageError);
}

TEST(Config, SnapshotCarriesVersionAndEveryKey) {
  const RunConfig c = load_config("pretrain", std::nullopt, {"steps=5"});
  const auto snap = c.snapshot();
  ASSERT_GE(snap.size(), 2u);
  EXPECT_EQ(snap[0], (std::pair<std::string, std::string>{"config_version", kConfigVersion}));
  EXPECT_EQ(snap[1].second, "pretrain");
  EXPECT_EQ(snap.size(), config_keys("pretrain").size() + 2);
  for (const auto& sub : subcommands()) EXPECT_NO_THROW(config_keys(sub));
  EXPECT_EQ(subcommands().size(), 12u);
}
