#pragma once

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smile {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input that exceeds a hard model/sequence cap.
class SequenceTooLong : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& msg, int line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class InvariantViolation : public Error {
 public:
  InvariantViolation(const std::string& msg, std::string field)
      : Error(msg + " [field: " + field + "]"), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class EmptyPoolError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void cat_one(std::ostringstream&) {}
template <typename T, typename... Ts>
void cat_one(std::ostringstream& os, T&& v, Ts&&... rest) {
  os << v;
  cat_one(os, std::forward<Ts>(rest)...);
}
}  // namespace detail

template <typename... Ts>
std::string strcat_msg(Ts&&... parts) {
  std::ostringstream os;
  detail::cat_one(os, std::forward<Ts>(parts)...);
  return os.str();
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Folds extra values into a seed; used to derive independent sub-streams
// (per step, per draw, per target id) from one experiment seed.
inline uint64_t derive_seed(uint64_t seed) { return splitmix64(seed); }
template <typename... Ts>
uint64_t derive_seed(uint64_t seed, uint64_t v, Ts... rest) {
  return derive_seed(splitmix64(seed ^ splitmix64(v)), rest...);
}

// Deterministic RNG with hand-rolled distributions. std:: distributions are
// implementation-defined, which would break the byte-identical reruns the
// corpus and trainer promise.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {
    for (int i = 0; i < 4; ++i) next_u64();
  }

  uint64_t next_u64() {
    // xorshift64* on a splitmix-initialized state
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dULL;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n).
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::bounded: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Inclusive range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw InvalidArgument("Rng::uniform_int: empty range");
    return lo + static_cast<int64_t>(bounded(static_cast<uint64_t>(hi - lo + 1)));
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller; u clamped away from 0
    double u = uniform();
    while (u <= 0.0) u = uniform();
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double two_pi_v = 2.0 * 3.14159265358979323846 * v;
    spare_ = r * std::sin(two_pi_v);
    have_spare_ = true;
    return r * std::cos(two_pi_v);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k > n) throw InvalidArgument("sample_without_replacement: k > n");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(bounded(static_cast<uint64_t>(n - i)));
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
    return out;
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

namespace io {

void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_f32(std::ostream& os, float v);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);
void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4], const std::string& what);

}  // namespace io

// Minimal CSV helpers; fields in this project never contain commas or quotes.
std::vector<std::string> split_csv_line(const std::string& line);
std::string join_csv(const std::vector<std::string>& fields);

// Shortest round-trippable decimal representation.
std::string format_double(double v);

}  // namespace smile
