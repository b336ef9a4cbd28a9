// SPDX-License-Identifier: Apache-2.0

#include "ldke/container.hpp"

#include <unistd.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ldke/errors.hpp"

namespace ldke {

namespace {

constexpr const char* kMagic = "LDKE-CONTAINER 1";

void put_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

double get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

void Container::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("= \n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw UsageError("container key/value not representable: " + key);
  }
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta.emplace_back(key, value);
}

bool Container::has(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return true;
  return false;
}

const std::string& Container::get(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw DataError("container (" + kind + ") lacks key '" + key + "'");
}

int Container::get_int(const std::string& key) const {
  try {
    return std::stoi(get(key));
  } catch (const std::logic_error&) {
    throw DataError("container key '" + key + "' is not an integer");
  }
}

double Container::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::logic_error&) {
    throw DataError("container key '" + key + "' is not a number");
  }
}

void Container::add(std::string name, Matrix value) {
  if (name.empty() || name.find_first_of(" \n") != std::string::npos) throw UsageError("bad tensor name: " + name);
  tensors.push_back({std::move(name), std::move(value)});
}

const Matrix& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw DataError("container (" + kind + ") lacks tensor '" + name + "'");
}

std::string serialize_container(const Container& c) {
  std::ostringstream header;
  header << kMagic << '\n' << "kind=" << c.kind << '\n';
  for (const auto& [k, v] : c.meta) header << k << '=' << v << '\n';
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    header << "tensor " << t.name << ' ' << t.value.rows << ' ' << t.value.cols << ' ' << offset << '\n';
    offset += t.value.size() * 4;
  }
  header << "end\n";
  std::string out = header.str();
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (double v : t.value.data) put_f32(out, v);
  return out;
}

Container parse_container(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  int line_no = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ParseError(source + ": truncated header at line " + std::to_string(line_no + 1));
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    return line;
  };
  if (next_line() != kMagic) throw ParseError(source + ": not an LDKE container (bad magic)");

  Container c;
  struct Desc {
    std::string name;
    int rows, cols;
    std::size_t offset;
  };
  std::vector<Desc> descs;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream in(line.substr(7));
      Desc d;
      if (!(in >> d.name >> d.rows >> d.cols >> d.offset) || d.rows < 0 || d.cols < 0) {
        throw ParseError(source + ": bad tensor descriptor at line " + std::to_string(line_no));
      }
      descs.push_back(d);
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source + ": malformed header line " + std::to_string(line_no));
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "kind") {
      c.kind = value;
    } else {
      c.meta.emplace_back(std::move(key), std::move(value));
    }
  }
  const std::size_t data_start = pos;
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  for (const auto& d : descs) {
    const std::size_t count = static_cast<std::size_t>(d.rows) * d.cols;
    if (data_start + d.offset + count * 4 > bytes.size()) {
      throw ParseError(source + ": tensor '" + d.name + "' extends past end of file");
    }
    Matrix m(d.rows, d.cols);
    const unsigned char* p = raw + data_start + d.offset;
    for (std::size_t i = 0; i < count; ++i) m.data[i] = get_f32(p + 4 * i);
    c.tensors.push_back({d.name, std::move(m)});
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, serialize_container(c));
}

Container read_container(const std::filesystem::path& path) { return parse_container(read_file(path), path.string()); }

}  // namespace ldke
