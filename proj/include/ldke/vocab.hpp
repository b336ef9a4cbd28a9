// SPDX-License-Identifier: Apache-2.0
//
// Closed word-level vocabulary. Table file format:
//
//   LDKE-VOCAB 1 size=<n>
//   <id>\t<surface form>        (n lines, ids 0..n-1 ascending)
//   # <key>=<value>             (optional trailing comment lines)

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ldke {

using TokenIds = std::vector<int>;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEndOfAnswer = 1;

  Vocabulary() = default;
  // words[0] and words[1] must be the pad and end-of-answer markers.
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  // Throws UnknownToken naming the word.
  int id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;

  // Whitespace-separated words to ids; throws UnknownToken.
  TokenIds tokenize(std::string_view text) const;
  std::string detokenize(const TokenIds& ids) const;

  std::string to_table() const;
  static Vocabulary from_table(const std::string& text);

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace ldke
