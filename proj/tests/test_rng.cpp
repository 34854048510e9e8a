#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "sacn/rng.hpp"

using namespace sacn;

TEST_CASE("rng: identical seed gives identical stream") {
  Rng a(123456789ull), b(123456789ull);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: different seeds diverge") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("rng: reference values are pinned for the documented generator") {
  // xoshiro256** seeded through splitmix64; a changed algorithm breaks
  // checkpoint compatibility, so the first outputs are pinned here.
  Rng a(0);
  CHECK(a.next_u64() == 11091344671253066420ull);
  CHECK(a.next_u64() == 13793997310169335082ull);
  CHECK(a.next_u64() == 1900383378846508768ull);
  Rng b(20240915);
  CHECK(b.next_u64() == 3033420781347110612ull);
  CHECK(b.next_u64() == 12035084623589859000ull);
  CHECK(b.next_u64() == 3314388697400848365ull);
  CHECK(Rng::derive_seed(42, "conv1.weight") == 8270677410362333218ull);
}

TEST_CASE("rng: uniform lies in [0,1) and fills the range") {
  Rng r(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("rng: below is bounded and covers all residues") {
  Rng r(9);
  std::vector<int> seen(10, 0);
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.below(10);
    REQUIRE(v < 10);
    seen[v]++;
  }
  for (int c : seen) CHECK(c > 500);
}

TEST_CASE("rng: normal has near-zero mean and unit variance") {
  Rng r(13);
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("rng: derived streams depend on the name") {
  const auto s1 = Rng::derive_seed(42, "conv1.weight");
  const auto s2 = Rng::derive_seed(42, "conv1.bias");
  const auto s3 = Rng::derive_seed(43, "conv1.weight");
  CHECK(s1 != s2);
  CHECK(s1 != s3);
  Rng a = Rng::derive(42, "conv1.weight");
  Rng b = Rng::derive(42, "conv1.weight");
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: shuffle is a permutation and is seed-deterministic") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng a(99), b(99);
  a.shuffle(v.begin(), v.end());
  b.shuffle(w.begin(), w.end());
  CHECK(v == w);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> want(50);
  std::iota(want.begin(), want.end(), 0);
  CHECK(sorted == want);
  CHECK(v != want);  // astronomically unlikely to be identity
}

TEST_CASE("rng: state save/restore resumes the exact stream") {
  Rng r(31337);
  for (int i = 0; i < 17; ++i) r.next_u64();
  const auto state = r.save_state();
  std::vector<std::uint64_t> ahead;
  for (int i = 0; i < 20; ++i) ahead.push_back(r.next_u64());
  Rng fresh(0);
  fresh.restore_state(state);
  for (int i = 0; i < 20; ++i) CHECK(fresh.next_u64() == ahead[i]);
}
