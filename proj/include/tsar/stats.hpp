#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tsar::stats {

double mean(std::span<const double> x);
double stddev(std::span<const double> x);  // sample (n-1)

// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

// Linear-interpolated quantile of an unsorted sample, q in [0,1].
double quantile(std::span<const double> x, double q);

struct Interval {
  double estimate = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap of the mean.
Interval bootstrap_ci(std::span<const double> x, double level = 0.99, int resamples = 1000, std::uint64_t seed = 0);

struct MannWhitney {
  double u = 0.0;  // U of the first sample: pairs (x, y) with x > y, ties count 1/2
  double z = 0.0;  // normal approximation, tie and continuity corrected
  double p_two_sided = 1.0;
  double p_less = 1.0;     // H1: first sample tends to be smaller
  double p_greater = 1.0;  // H1: first sample tends to be larger
  bool exact = false;
  bool ties = false;
};

// Exact enumeration when the pooled sample has at most `exact_max` values,
// normal approximation otherwise.
MannWhitney mann_whitney(std::span<const double> x, std::span<const double> y, int exact_max = 20);

double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

struct SignTest {
  int wins = 0;  // a > b
  int losses = 0;
  int ties = 0;  // dropped
  double p_greater = 1.0;  // one-sided, H1: a > b
  double p_two_sided = 1.0;
};

SignTest sign_test(std::span<const double> a, std::span<const double> b);

// P(X >= k) for X ~ Binomial(n, 1/2).
double binomial_upper_tail(int n, int k);

}  // namespace tsar::stats
