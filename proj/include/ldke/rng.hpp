// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ldke {

// Fixed derivation of a per-component seed from a global seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform();                   // [0, 1)
  int uniform_int(int lo, int hi);    // inclusive bounds
  std::uint64_t next() { return engine_(); }

  template <typename It>
  void shuffle(It first, It last) {
    // Fisher-Yates with our own index draws so the order does not depend on
    // the standard library's shuffle implementation.
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const auto j = static_cast<decltype(i)>(next() % static_cast<std::uint64_t>(i + 1));
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ldke
