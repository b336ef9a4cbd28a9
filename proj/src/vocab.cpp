// SPDX-License-Identifier: Apache-2.0

#include "ldke/vocab.hpp"

#include <sstream>

#include "ldke/errors.hpp"

namespace ldke {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (int i = 0; i < size(); ++i) {
    if (words_[i].empty() || words_[i].find_first_of(" \t\n") != std::string::npos) {
      throw DataError("vocabulary entry " + std::to_string(i) + " is not a single word");
    }
    if (!index_.emplace(words_[i], i).second) throw DataError("duplicate vocabulary entry: " + words_[i]);
  }
}

bool Vocabulary::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw UnknownToken("word not in vocabulary: '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw UnknownToken("token id out of range: " + std::to_string(id));
  return words_[id];
}

TokenIds Vocabulary::tokenize(std::string_view text) const {
  TokenIds out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string Vocabulary::detokenize(const TokenIds& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::string Vocabulary::to_table() const {
  std::ostringstream out;
  out << "LDKE-VOCAB 1 size=" << size() << '\n';
  for (int i = 0; i < size(); ++i) out << i << '\t' << words_[i] << '\n';
  return out.str();
}

Vocabulary Vocabulary::from_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("LDKE-VOCAB 1 size=", 0) != 0) {
    throw ParseError("vocabulary table: bad header at line 1");
  }
  const int n = std::stoi(line.substr(18));
  std::vector<std::string> words;
  for (int i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ParseError("vocabulary table: truncated at line " + std::to_string(i + 2));
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoi(line.substr(0, tab)) != i) {
      throw ParseError("vocabulary table: malformed line " + std::to_string(i + 2));
    }
    words.push_back(line.substr(tab + 1));
  }
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') throw ParseError("vocabulary table: trailing content after the table");
  }
  return Vocabulary(std::move(words));
}

}  // namespace ldke
