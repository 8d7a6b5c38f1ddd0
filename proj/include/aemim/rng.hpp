#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aemim/errors.hpp"

namespace aemim {

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// One named deterministic random stream. Streams derived from the same master
// seed but different names are independent; state round-trips exactly through
// serialize()/restore() so runs can be resumed bit-identically.
class Rng {
 public:
  Rng() : gen_(0) {}
  explicit Rng(uint64_t seed, std::string_view stream = "") {
    std::seed_seq seq{seed, fnv1a64(stream)};
    gen_.seed(seq);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractViolation("uniform_int: n must be positive");
    return std::uniform_int_distribution<uint64_t>(0, n - 1)(gen_);
  }

  double normal(double mean, double sd) {
    return std::normal_distribution<double>(mean, sd)(gen_);
  }

  // Sorted uniform subset of {0..n-1} of size k, without replacement.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ContractViolation("sample_without_replacement: k out of range");
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(uniform_int(static_cast<uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(p[i], p[j]);
    }
    return p;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void restore(const std::string& state) {
    std::istringstream is(state);
    is >> gen_;
    if (is.fail()) throw ContractViolation("Rng::restore: malformed state string");
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace aemim
