#include <cmath>
#include <random>

#include "doctest.h"
#include "tsar/error.hpp"
#include "tsar/stats.hpp"

using namespace tsar;
using namespace tsar::stats;

TEST_CASE("mann-whitney small samples") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const MannWhitney m = mann_whitney(a, b);
  CHECK(m.exact);
  CHECK(m.u == 0.0);
  CHECK(m.p_less == doctest::Approx(0.05));
  CHECK(m.p_two_sided == doctest::Approx(0.1));
  CHECK(m.p_greater == 1.0);
  CHECK_FALSE(m.ties);

  const MannWhitney r = mann_whitney(b, a);
  CHECK(r.u == 9.0);
  CHECK(r.p_greater == doctest::Approx(0.05));

  const std::vector<double> same{2, 2, 2};
  const MannWhitney t = mann_whitney(same, same);
  CHECK(t.p_two_sided == 1.0);
  CHECK(t.ties);
  CHECK_THROWS_AS(mann_whitney(std::vector<double>{}, a), Error);
}

TEST_CASE("mann-whitney exact and normal agree on larger samples") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(10), y(10);
  for (double& v : x) v = g(rng);
  for (double& v : y) v = g(rng) + 0.8;
  const MannWhitney e = mann_whitney(x, y, 20);
  const MannWhitney n = mann_whitney(x, y, 0);
  CHECK(e.exact);
  CHECK_FALSE(n.exact);
  CHECK(e.u == n.u);
  CHECK(std::abs(e.p_two_sided - n.p_two_sided) < 0.01);
  // U counts pairs with x > y.
  double pairs = 0.0;
  for (double a : x)
    for (double b : y) pairs += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  CHECK(e.u == pairs);
}

TEST_CASE("bootstrap interval") {
  const std::vector<double> c(12, 0.4);
  const Interval i = bootstrap_ci(c);
  CHECK(i.estimate == doctest::Approx(0.4));
  CHECK(i.lo == doctest::Approx(0.4));
  CHECK(i.hi == doctest::Approx(0.4));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(1.0, 1.0);
  std::vector<double> x(400);
  for (double& v : x) v = g(rng);
  const Interval b = bootstrap_ci(x, 0.99, 2000, 5);
  CHECK(b.lo < b.estimate);
  CHECK(b.estimate < b.hi);
  // Normal-theory half-width 2.576 s / sqrt(n).
  CHECK(std::abs((b.hi - b.lo) / 2.0 - 2.576 * stddev(x) / 20.0) < 0.02);
  CHECK(bootstrap_ci(x, 0.99, 100, 9).lo == bootstrap_ci(x, 0.99, 100, 9).lo);
  CHECK_THROWS_AS(bootstrap_ci(x, 1.5), Error);
}

TEST_CASE("correlations") {
  std::vector<double> x, y, z;
  for (int i = 0; i < 20; ++i) {
    x.push_back(i);
    y.push_back(2.0 * i);
    z.push_back(std::exp(0.3 * i));
  }
  CHECK(std::abs(pearson(x, y) - 1.0) <= 1e-12);
  CHECK(pearson(x, z) < 1.0);
  CHECK(spearman(x, z) == doctest::Approx(1.0));
  std::vector<double> neg(y.rbegin(), y.rend());
  CHECK(std::abs(pearson(x, neg) + 1.0) <= 1e-12);
  CHECK(std::isnan(pearson(x, std::vector<double>(20, 1.0))));
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1.0}), Error);
}

TEST_CASE("ranks and quantiles") {
  CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  const std::vector<double> v{4, 1, 3, 2};
  CHECK(quantile(v, 0.0) == 1.0);
  CHECK(quantile(v, 1.0) == 4.0);
  CHECK(quantile(v, 0.5) == 2.5);
  CHECK(mean(v) == 2.5);
  CHECK(stddev(v) == doctest::Approx(std::sqrt(5.0 / 3.0)));
}

TEST_CASE("sign test") {
  CHECK(binomial_upper_tail(10, 9) == doctest::Approx(11.0 / 1024.0));
  CHECK(binomial_upper_tail(10, 0) == 1.0);
  CHECK(binomial_upper_tail(10, 11) == 0.0);
  const std::vector<double> a{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, b{0, 1, 2, 3, 4, 5, 6, 7, 8, 11};
  const SignTest s = sign_test(a, b);
  CHECK(s.wins == 9);
  CHECK(s.losses == 1);
  CHECK(s.p_greater == doctest::Approx(11.0 / 1024.0));
  CHECK(s.p_two_sided == doctest::Approx(22.0 / 1024.0));
  const SignTest t = sign_test(a, a);
  CHECK(t.ties == 10);
  CHECK(t.p_two_sided == 1.0);
  CHECK_THROWS_AS(sign_test(a, std::vector<double>{1.0}), Error);
}
