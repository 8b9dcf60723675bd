#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "nahtm/rng.h"

using namespace nahtm;

TEST_CASE("streams are reproducible and key dependent") {
  CounterRng a(derive_key({1, 2, 3})), b(derive_key({1, 2, 3})), c(derive_key({1, 2, 4}));
  bool differ = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differ = differ || x != c.next_u64();
  }
  CHECK(differ);
}

TEST_CASE("derive_key is order sensitive") { CHECK(derive_key({1, 2}) != derive_key({2, 1})); }

TEST_CASE("uniform stays in range and below is unbiased enough") {
  CounterRng r(5);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const auto k = r.below(7);
    REQUIRE(k < 7);
    ++hist[k];
  }
  for (int h : hist) CHECK(std::abs(h - 10000) < 500);
}

TEST_CASE("normal moments") {
  CounterRng r(9);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("fill_normal matches repeated normal") {
  CounterRng a(3), b(3);
  std::vector<double> v(9);
  a.fill_normal(v);
  for (double x : v) CHECK(x == b.normal());
}
