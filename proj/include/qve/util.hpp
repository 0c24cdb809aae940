#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qve {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// All randomness in the project flows through this wrapper so draws stay
// reproducible regardless of platform library quirks.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // uniform double in [0, 1)
  double uniform01() { return (eng_() >> 11) * (1.0 / 9007199254740992.0); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(eng_()) * n) >> 64);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices drawn from [0, n), in draw order
  std::vector<size_t> sample_indices(size_t n, size_t k) {
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k && i < n; ++i) {
      size_t j = i + uniform_int(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw Error("Rng: bad serialized state");
  }

 private:
  std::mt19937_64 eng_;
};

// Per-stage seed fan-out: one run seed, independent streams per stage name.
inline uint64_t derive_seed(uint64_t run_seed, std::string_view stage) {
  return fnv1a64(stage, run_seed ^ 0x9e3779b97f4a7c15ULL);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

}  // namespace qve
