#include <doctest.h>

#include <set>
#include <sstream>

#include "smile/common.hpp"

using namespace smile;

TEST_CASE("rng is deterministic per seed") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    uint64_t va = a.next_u64();
    CHECK(va == b.next_u64());
  }
  bool any_diff = false;
  Rng a2(42);
  for (int i = 0; i < 10; ++i) any_diff |= (a2.next_u64() != c.next_u64());
  CHECK(any_diff);
}

TEST_CASE("uniform stays in [0,1), gaussian has sane moments") {
  Rng rng(7);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    double g = rng.gaussian();
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("bounded covers the whole range") {
  Rng rng(3);
  std::set<uint64_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(rng.bounded(7));
  CHECK(seen.size() == 7);
  CHECK(*seen.rbegin() == 6);
  CHECK_THROWS_AS(rng.bounded(0), InvalidArgument);
}

TEST_CASE("sample_without_replacement yields distinct valid indices") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto idx = rng.sample_without_replacement(10, 6);
    std::set<int> s(idx.begin(), idx.end());
    CHECK(s.size() == 6);
    CHECK(*s.begin() >= 0);
    CHECK(*s.rbegin() < 10);
  }
  CHECK_THROWS_AS(rng.sample_without_replacement(3, 4), InvalidArgument);
}

TEST_CASE("derive_seed differs across parts") {
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
}

TEST_CASE("binary io round-trips") {
  std::stringstream ss;
  io::write_u16(ss, 0xBEEF);
  io::write_u32(ss, 0xDEADBEEF);
  io::write_f32(ss, 3.25f);
  io::write_magic(ss, "SMLT");
  CHECK(io::read_u16(ss) == 0xBEEF);
  CHECK(io::read_u32(ss) == 0xDEADBEEF);
  CHECK(io::read_f32(ss) == 3.25f);
  CHECK_NOTHROW(io::expect_magic(ss, "SMLT", "test"));
}

TEST_CASE("csv helpers") {
  auto f = split_csv_line("a,b,,d");
  REQUIRE(f.size() == 4);
  CHECK(f[2].empty());
  CHECK(join_csv(f) == "a,b,,d");
  double v = 0.1234567890123456789;
  CHECK(std::stod(format_double(v)) == v);
}
