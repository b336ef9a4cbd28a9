// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a text header followed by raw little-endian float32
// tensor data.
//
//   LDKE-CONTAINER 1
//   kind=<model|editor|router|package>
//   <key>=<value>                      (zero or more, in order)
//   tensor <name> <rows> <cols> <byte offset>
//   ...
//   end
//   <float32 data, tensors in declared order>
//
// Offsets are relative to the first byte after the "end\n" line. Values are
// stored as float32; every parameter in this project is float32-representable
// so a save/load round trip is bit-exact.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ldke/tensor.hpp"

namespace ldke {

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Container {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  void set(const std::string& key, const std::string& value);
  // Throws DataError when absent.
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;

  void add(std::string name, Matrix value);
  // Throws DataError when absent.
  const Matrix& tensor(const std::string& name) const;
};

std::string serialize_container(const Container& c);
Container parse_container(const std::string& bytes, const std::string& source = "<memory>");

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Writes to a temporary sibling file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
// Throws DataError naming the path when it cannot be read.
std::string read_file(const std::filesystem::path& path);

}  // namespace ldke
