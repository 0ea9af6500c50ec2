#include "tsar/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "tsar/error.hpp"

namespace tsar::stats {

namespace {

void need(std::span<const double> x, const char* what) {
  if (x.empty()) fail(ErrorKind::kInvalidArgument, std::string(what) + ": empty sample");
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

double mean(std::span<const double> x) {
  need(x, "mean");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

double quantile(std::span<const double> x, double q) {
  need(x, "quantile");
  std::vector<double> v(x.begin(), x.end());
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Interval bootstrap_ci(std::span<const double> x, double level, int resamples, std::uint64_t seed) {
  need(x, "bootstrap_ci");
  if (!(level > 0.0 && level < 1.0) || resamples < 1) fail(ErrorKind::kInvalidArgument, "bootstrap_ci: bad level or count");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[pick(rng)];
    m = s / static_cast<double>(x.size());
  }
  const double a = 0.5 * (1.0 - level);
  return Interval{mean(x), quantile(means, a), quantile(means, 1.0 - a)};
}

MannWhitney mann_whitney(std::span<const double> x, std::span<const double> y, int exact_max) {
  need(x, "mann_whitney");
  need(y, "mann_whitney");
  const std::size_t n1 = x.size(), n2 = y.size(), n = n1 + n2;
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::vector<double> r = average_ranks(pooled);
  MannWhitney out;
  const double shift = static_cast<double>(n1 * (n1 + 1)) / 2.0;
  out.u = std::accumulate(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(n1), 0.0) - shift;

  double tie_term = 0.0;
  {
    std::vector<double> s = pooled;
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < s.size();) {
      std::size_t j = i;
      while (j + 1 < s.size() && s[j + 1] == s[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      out.ties |= t > 1;
      i = j + 1;
    }
  }
  if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled[0]; })) {
    out.ties = true;
    return out;
  }

  const double mu = static_cast<double>(n1 * n2) / 2.0;
  if (static_cast<int>(n) <= exact_max) {
    // Every way of drawing the first sample's ranks from the pooled ranks.
    out.exact = true;
    std::vector<bool> choose(n, false);
    std::fill(choose.begin(), choose.begin() + static_cast<std::ptrdiff_t>(n1), true);
    std::uint64_t total = 0, le = 0, ge = 0;
    const double eps = 1e-9;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (choose[i]) s += r[i];
      const double u = s - shift;
      ++total;
      le += u <= out.u + eps;
      ge += u >= out.u - eps;
    } while (std::prev_permutation(choose.begin(), choose.end()));
    out.p_less = static_cast<double>(le) / static_cast<double>(total);
    out.p_greater = static_cast<double>(ge) / static_cast<double>(total);
  } else {
    const double nn = static_cast<double>(n);
    const double var = static_cast<double>(n1 * n2) / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    const double sd = std::sqrt(var);
    out.p_less = normal_cdf((out.u - mu + 0.5) / sd);
    out.p_greater = 1.0 - normal_cdf((out.u - mu - 0.5) / sd);
  }
  {
    const double nn = static_cast<double>(n);
    const double var = static_cast<double>(n1 * n2) / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    const double d = out.u - mu;
    out.z = d == 0.0 ? 0.0 : (d - std::copysign(0.5, d)) / std::sqrt(var);
  }
  out.p_two_sided = std::min(1.0, 2.0 * std::min(out.p_less, out.p_greater));
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorKind::kInvalidArgument, "pearson: need two equal samples of n >= 2");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::kInvalidArgument, "spearman: samples differ in length");
  return pearson(average_ranks(x), average_ranks(y));
}

double binomial_upper_tail(int n, int k) {
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  double p = 0.0;
  for (int i = k; i <= n; ++i) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::kInvalidArgument, "sign_test: unpaired samples");
  SignTest s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) {
      ++s.wins;
    } else if (a[i] < b[i]) {
      ++s.losses;
    } else {
      ++s.ties;
    }
  }
  const int n = s.wins + s.losses;
  s.p_greater = binomial_upper_tail(n, s.wins);
  s.p_two_sided = std::min(1.0, 2.0 * binomial_upper_tail(n, std::max(s.wins, s.losses)));
  if (n == 0) s.p_two_sided = 1.0;
  return s;
}

}  // namespace tsar::stats
