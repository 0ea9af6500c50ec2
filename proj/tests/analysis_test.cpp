#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "tsar/analysis.hpp"
#include "tsar/error.hpp"
#include "tsar/stats.hpp"

using namespace tsar;
using namespace tsar::analysis;

namespace {

// One full-detail layer per entry of `sizes`, uniform random gates.
RegulationTrace random_full(const std::vector<std::int64_t>& sizes, int tasks, int per_task, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RegulationTrace t;
  t.detail = TraceDetail::kFull;
  for (std::size_t l = 0; l < sizes.size(); ++l) t.layers.push_back(TraceLayer{"L" + std::to_string(l), Shape{sizes[l]}, {}});
  int step = 0;
  for (int c = 0; c < tasks; ++c) {
    for (int i = 0; i < per_task; ++i) {
      TraceStep s{step++, c, c, i, {}, {}, {}};
      for (std::int64_t n : sizes) {
        std::vector<double> g(static_cast<std::size_t>(n));
        for (double& x : g) x = u(rng);
        s.summary.push_back(summarize(g));
        s.gates.push_back(std::move(g));
      }
      t.steps.push_back(std::move(s));
    }
  }
  return t;
}

// Single layer, gates[k][j] given explicitly.
RegulationTrace explicit_trace(const std::vector<std::vector<double>>& gates, const std::vector<int>& tasks) {
  RegulationTrace t;
  t.detail = TraceDetail::kFull;
  t.layers = {TraceLayer{"S", Shape{static_cast<std::int64_t>(gates[0].size())}, {}}};
  for (std::size_t k = 0; k < gates.size(); ++k) {
    t.steps.push_back(TraceStep{static_cast<int>(k), tasks[k], tasks[k], 0, {summarize(gates[k])}, {gates[k]}, {}});
  }
  return t;
}

// Upstream layer "C1" plus a CP layer of shape (classes, width) with weights.
RegulationTrace cp_trace(int classes, int width, int tasks, int per_task,
                         const std::function<void(int, int, std::vector<double>&, std::vector<double>&,
                                                  std::vector<double>&)>& fill) {
  RegulationTrace t;
  t.detail = TraceDetail::kFull;
  t.layers = {TraceLayer{"C1", Shape{4}, {}}, TraceLayer{"CP", Shape{classes, width}, {}}};
  int step = 0;
  for (int c = 0; c < tasks; ++c) {
    for (int i = 0; i < per_task; ++i) {
      TraceStep s{step, c, c, i, {}, {}, {}};
      std::vector<double> up(4), cp(static_cast<std::size_t>(classes * width)), w(cp.size());
      fill(step, c, up, cp, w);
      s.summary = {summarize(up), summarize(cp)};
      s.gates = {up, cp};
      s.cp_weights = w;
      t.steps.push_back(std::move(s));
      ++step;
    }
  }
  return t;
}

}  // namespace

TEST_CASE("task-specific activity") {
  const RegulationTrace c = explicit_trace({{0.3}, {0.3}, {0.3}, {0.0}, {1.0}}, {0, 0, 0, 1, 1});
  CHECK(task_specific_activity(c, 0, 0, 0) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(task_specific_activity(c, 0, 0, 1) == 0.5);
  CHECK(task_agnostic_activity(c, 0, 0, 0) == 0.5);
  CHECK(task_agnostic_activity(c, 0, 0, 1) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(task_specific_activity(c, 0, 0, 7), Error);
  CHECK_THROWS_AS(task_specific_activity(c, 0, 3, 0), Error);
  const RegulationTrace one = explicit_trace({{0.2}, {0.4}}, {0, 0});
  CHECK_THROWS_AS(task_agnostic_activity(one, 0, 0, 0), Error);

  const RegulationTrace same = explicit_trace({{0.7}, {0.7}, {0.7}}, {0, 1, 2});
  CHECK(task_agnostic_activity(same, 0, 0, 1) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("activity table matches a brute-force recount") {
  const RegulationTrace t = random_full({200}, 5, 10, 17);
  const ActivityTable a = activity_table(layer_series(t, 0));
  REQUIRE(a.tasks.size() == 5);
  double worst = 0.0;
  for (std::size_t j = 0; j < 200; ++j) {
    for (std::size_t c = 0; c < 5; ++c) {
      double spec = 0.0;
      int k = 0;
      double others[5] = {0, 0, 0, 0, 0};
      int counts[5] = {0, 0, 0, 0, 0};
      for (const TraceStep& s : t.steps) {
        others[s.task] += s.gates[0][j];
        ++counts[s.task];
        if (static_cast<std::size_t>(s.task) == c) {
          spec += s.gates[0][j];
          ++k;
        }
      }
      spec /= k;
      double agn = 0.0;
      for (std::size_t o = 0; o < 5; ++o)
        if (o != c) agn += others[o] / counts[o];
      agn /= 4.0;
      worst = std::max(worst, std::abs(a.specific[a.index(j, c)] - spec));
      worst = std::max(worst, std::abs(a.agnostic[a.index(j, c)] - agn));
      worst = std::max(worst, std::abs(task_specific_activity(t, 0, static_cast<std::int64_t>(j), static_cast<int>(c)) - spec));
      worst = std::max(worst, std::abs(task_agnostic_activity(t, 0, static_cast<std::int64_t>(j), static_cast<int>(c)) - agn));
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("log ranks") {
  const std::vector<double> r = log_ranks({0.9, 0.1, 0.5, 0.5});
  CHECK(r[0] == 0.0);
  CHECK(r[1] == doctest::Approx(5.0));
  CHECK(r[2] == doctest::Approx(5.0 * std::log(2.5) / std::log(4.0)));
  CHECK(r[2] == r[3]);
  CHECK(log_ranks({0.4}) == std::vector<double>{0.0});
}

TEST_CASE("modularity histogram conserves mass") {
  const RegulationTrace t = random_full({150}, 4, 6, 3);
  const Histogram2D h = modularity_histogram(activity_table(layer_series(t, 0)));
  CHECK(h.rows == 100);
  CHECK(h.warning.empty());
  CHECK(h.total() == 150u * 4u);

  const RegulationTrace small = random_full({30}, 3, 2, 4);
  const Histogram2D c = modularity_histogram(activity_table(layer_series(small, 0)));
  CHECK(c.rows == 30);
  CHECK_FALSE(c.warning.empty());
  CHECK(c.total() == 90u);
}

TEST_CASE("perfectly correlated ranks sit on the diagonal") {
  // Two tasks with identical activity: specific and agnostic ranks coincide.
  std::vector<std::vector<double>> g;
  std::vector<int> tasks;
  for (int c = 0; c < 2; ++c) {
    std::vector<double> row(120);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<double>(j) / 120.0;
    g.push_back(row);
    tasks.push_back(c);
  }
  const Histogram2D h = modularity_histogram(activity_table(layer_series(explicit_trace(g, tasks), 0)));
  for (int r = 0; r < h.rows; ++r)
    for (int c = 0; c < h.cols; ++c)
      if (r != c) CHECK(h.at(r, c) == 0u);
  CHECK(h.total() == 240u);
}

TEST_CASE("synthetic modular trace separates modules") {
  SyntheticSpec spec;
  spec.num_synapses = 1000;
  spec.num_tasks = 10;
  spec.per_task = 5;
  const RegulationTrace t = synthetic_trace(spec, 8);
  for (const TraceStep& s : t.steps) {
    for (std::size_t j = 0; j < 1000; ++j) {
      if (module_of(spec, static_cast<std::int64_t>(j)) != s.task) CHECK(s.gates[0][j] == 0.0);
    }
  }
  const ActivityTable a = activity_table(layer_series(t, 0));
  int in_module = 0, separated = 0;
  for (std::size_t j = 0; j < 1000; ++j) {
    const auto c = static_cast<std::size_t>(module_of(spec, static_cast<std::int64_t>(j)));
    CHECK(a.specific[a.index(j, c)] > a.agnostic[a.index(j, c)]);
    ++in_module;
    separated += bin_of(a.specific_rank[a.index(j, c)], 0, 5, 100) < bin_of(a.agnostic_rank[a.index(j, c)], 0, 5, 100);
  }
  CHECK(separated == in_module);

  SyntheticSpec one = spec;
  one.num_tasks = 1;
  const RegulationTrace single = synthetic_trace(one, 8);
  for (double g : single.steps[0].gates[0]) CHECK(g > 0.0);

  spec.num_synapses = 5;
  CHECK_THROWS_AS(synthetic_trace(spec, 1), Error);
}

TEST_CASE("synthetic random trace") {
  SyntheticSpec spec;
  spec.kind = SyntheticKind::kRandom;
  spec.num_synapses = 2000;
  spec.num_tasks = 10;
  spec.per_task = 10;
  const RegulationTrace t = synthetic_trace(spec, 4);
  double sum = 0.0, n = 0.0;
  for (const TraceStep& s : t.steps)
    for (double g : s.gates[0]) {
      sum += g;
      n += 1.0;
    }
  // Monte-Carlo mean of a clipped N(0.5, 0.2); symmetric about 0.5.
  std::mt19937_64 rng(99);
  std::normal_distribution<double> gauss(0.5, 0.2);
  double mc = 0.0;
  for (int i = 0; i < 200000; ++i) mc += std::clamp(gauss(rng), 0.0, 1.0);
  mc /= 200000.0;
  CHECK(std::abs(sum / n - mc) < 2e-3);

  const ActivityTable a = activity_table(layer_series(t, 0));
  CHECK(std::abs(stats::spearman(a.specific_rank, a.agnostic_rank)) < 0.1);
}

TEST_CASE("time-lag histogram") {
  std::vector<std::vector<double>> g;
  std::vector<int> tasks;
  for (int k = 0; k < 6; ++k) {
    g.push_back({0.4, k % 2 ? 0.1 : 0.9});
    tasks.push_back(k / 3);
  }
  const LayerSeries s = layer_series(explicit_trace(g, tasks), 0);
  Histogram2D h = timelag_histogram(s, 0.0, 1.0);
  CHECK(h.rows == 250);
  CHECK(h.total() == 10u);
  const int a = bin_of(0.4, 0, 1, 250), lo = bin_of(0.1, 0, 1, 250), hi = bin_of(0.9, 0, 1, 250);
  CHECK(h.at(a, a) == 5u);
  CHECK(h.at(hi, lo) == 3u);
  CHECK(h.at(lo, hi) == 2u);

  const RegulationTrace r = random_full({400}, 4, 5, 6);
  const LayerSeries rs = layer_series(r, 0);
  h = timelag_histogram(rs, 0.75, 0.99);
  // 0.75..0.99 of 400 synapses by mean: positions 300..395.
  CHECK(h.total() == 96u * 19u);
  std::vector<double> score(400, 0.0);
  for (std::size_t k = 0; k < rs.steps(); ++k)
    for (std::size_t j = 0; j < 400; ++j) score[j] += rs.value(k, j);
  std::vector<std::uint64_t> brute(250 * 250, 0);
  for (std::size_t j : centile_band(score, 0.75, 0.99))
    for (std::size_t k = 0; k + 1 < rs.steps(); ++k)
      ++brute[static_cast<std::size_t>(bin_of(rs.value(k, j), 0, 1, 250) * 250 + bin_of(rs.value(k + 1, j), 0, 1, 250))];
  CHECK(h.counts == brute);

  CHECK_THROWS_AS(timelag_histogram(layer_series(explicit_trace({{0.5}}, {0}), 0)), Error);
}

TEST_CASE("spike sizes") {
  std::vector<std::vector<double>> g = {std::vector<double>(10, 0.1), std::vector<double>(10, 0.1),
                                        std::vector<double>(10, 0.1)};
  for (int j = 0; j < 3; ++j) g[0][static_cast<std::size_t>(j)] = g[1][static_cast<std::size_t>(j)] = 0.8;
  for (int j = 0; j < 7; ++j) g[2][static_cast<std::size_t>(j)] = 0.8;
  const LayerSeries s = layer_series(explicit_trace(g, {0, 0, 1}), 0);
  const std::vector<SpikeCounts> d = spike_size_distribution(s, {0.5, 0.9});
  CHECK(d[0].freq == std::map<int, std::uint64_t>{{3, 2}, {7, 1}});
  CHECK(d[1].freq == std::map<int, std::uint64_t>{{0, 3}});
  CHECK_THROWS_AS(spike_size_distribution(s, {1.0}), Error);

  const LayerSeries r = layer_series(random_full({300}, 3, 20, 2), 0);
  for (const SpikeCounts& sc : spike_size_distribution(r)) {
    for (std::size_t k = 0; k < r.steps(); ++k) {
      int n = 0;
      for (std::size_t j = 0; j < r.synapses(); ++j) n += r.value(k, j) > sc.threshold ? 1 : 0;
      CHECK(sc.per_step[k] == n);
    }
  }
}

TEST_CASE("power-law fits recover synthetic exponents") {
  for (double alpha : {1.5, 2.0, 3.0}) {
    std::map<int, double> exact;
    for (int s = 1; s <= 100000; ++s) exact[s] = 1e12 * std::pow(s, -alpha);
    const PowerLawFit f = powerlaw_fit(log_binned(exact));
    INFO("alpha " << alpha);
    CHECK(std::abs(f.slope + alpha) <= 0.1);
    CHECK(f.r2 > 0.99);
    CHECK(f.power_law());
    if (alpha == 2.0) CHECK(std::abs(f.slope + 2.0) <= 0.05);

    // Sampled from the discrete law itself, over a support whose tail bins
    // still expect a few dozen draws.
    const int support = static_cast<int>(std::pow(10.0, 6.0 / alpha));
    std::vector<double> weights(static_cast<std::size_t>(support));
    for (int s = 1; s <= support; ++s) weights[static_cast<std::size_t>(s - 1)] = std::pow(s, -alpha);
    std::discrete_distribution<int> draw(weights.begin(), weights.end());
    std::mt19937_64 rng(static_cast<std::uint64_t>(alpha * 10));
    std::map<int, std::uint64_t> counts;
    for (int i = 0; i < 1000000; ++i) ++counts[draw(rng) + 1];
    const PowerLawFit g = powerlaw_fit(log_binned(counts, 5));
    CHECK(std::abs(g.slope + alpha) <= 0.1);
  }

  std::map<int, double> flat;
  for (int s = 1; s <= 1000; ++s) flat[s] = 5.0;
  const PowerLawFit f = powerlaw_fit(log_binned(flat));
  CHECK(std::abs(f.slope) < 1e-9);
  CHECK_FALSE(f.power_law());
  CHECK_THROWS_AS(powerlaw_fit(log_binned(std::map<int, double>{{4, 1.0}})), Error);
}

TEST_CASE("CP sign analysis") {
  // Negative-weight gates copy the upstream spike, positive ones mirror it.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const RegulationTrace t = cp_trace(2, 3, 2, 10, [&](int, int, std::vector<double>& up, std::vector<double>& cp,
                                                      std::vector<double>& w) {
    // Synapse 0 dominates the mean, so it alone is the top tenth of four.
    for (double& x : up) x = 0.5 * u(rng);
    up[0] = 0.6 + 0.4 * u(rng);
    const double spike = up[0];
    for (std::size_t i = 0; i < cp.size(); ++i) {
      w[i] = i % 2 ? -0.5 : 0.5;
      cp[i] = i % 2 ? spike : 1.0 - spike;
    }
  });
  const CpSignReport r = cp_sign_analysis(t);
  CHECK(r.corr_neg == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.corr_pos == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(r.positive == 3);
  CHECK(r.negative == 3);
  for (std::size_t k = 0; k < t.steps.size(); ++k) CHECK(r.upstream_spikes[k] == t.steps[k].gates[0][0]);

  RegulationTrace no_cp = random_full({4, 6}, 2, 3, 1);
  CHECK_THROWS_AS(cp_sign_analysis(no_cp), Error);
}

TEST_CASE("class-node dynamics") {
  const auto constant = [](int, int, std::vector<double>& up, std::vector<double>& cp, std::vector<double>& w) {
    std::fill(up.begin(), up.end(), 0.5);
    std::fill(cp.begin(), cp.end(), 0.3);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = i % 2 ? -1.0 : 1.0;
  };
  const ClassNodeDynamics flat = class_node_dynamics({cp_trace(3, 4, 3, 5, constant), cp_trace(3, 4, 3, 5, constant)});
  for (double v : flat.within_pos.mean) CHECK(v == 0.0);
  for (double v : flat.after_neg.mean) CHECK(v == 0.0);
  CHECK(flat.within_pos.mean.size() == 5);

  // Within each task the gates ramp from 0.2 to 0.4; the previous task ends at 0.2.
  const auto ramp = [](int step, int task, std::vector<double>& up, std::vector<double>& cp, std::vector<double>& w) {
    std::fill(up.begin(), up.end(), 0.5);
    const int o = step - task * 5;
    const double within = 0.2 + 0.2 * o / 4.0;
    const double g = o == 4 && task < 2 ? 0.2 : within;
    std::fill(cp.begin(), cp.end(), g);
    std::fill(w.begin(), w.end(), 1.0);
  };
  const ClassNodeDynamics d = class_node_dynamics({cp_trace(3, 2, 3, 5, ramp), cp_trace(3, 2, 3, 5, ramp)});
  CHECK(d.runs == 2);
  CHECK(d.within_pos.mean[0] == doctest::Approx(0.0));
  CHECK(d.within_pos.mean[3] == doctest::Approx(75.0));
  CHECK(std::isnan(d.within_neg.mean[0]));
  CHECK(d.within_pos.sd[3] == 0.0);

  const ClassNodeDynamics linear = class_node_dynamics(
      {cp_trace(2, 2, 2, 5,
                [](int step, int, std::vector<double>& up, std::vector<double>& cp, std::vector<double>& w) {
                  std::fill(up.begin(), up.end(), 0.5);
                  std::fill(cp.begin(), cp.end(), step < 5 ? 0.2 : 0.2 + 0.2 * (step - 5) / 4.0);
                  std::fill(w.begin(), w.end(), 1.0);
                }),
       cp_trace(2, 2, 2, 5, [](int step, int, std::vector<double>& up, std::vector<double>& cp, std::vector<double>& w) {
         std::fill(up.begin(), up.end(), 0.5);
         std::fill(cp.begin(), cp.end(), step < 5 ? 0.2 : 0.2 + 0.2 * (step - 5) / 4.0);
         std::fill(w.begin(), w.end(), 1.0);
       })});
  CHECK(linear.within_pos.mean.back() == doctest::Approx(100.0));

  CHECK_THROWS_AS(class_node_dynamics({cp_trace(3, 4, 3, 5, constant)}), Error);
  CHECK_THROWS_AS(class_node_dynamics({cp_trace(3, 4, 3, 5, constant), cp_trace(3, 4, 2, 5, constant)}), Error);
}

TEST_CASE("PCA and KNN cluster check") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01(0.0, 1.0);
  const int n = 80, d = 60;
  std::vector<double> x(static_cast<std::size_t>(n * d));
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 2;
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(i * d + j)] = n01(rng) + (i % 2 ? 6.0 : -6.0);
  }
  CHECK(encoding_cluster_check(x, n, d, labels).accuracy == 1.0);

  std::vector<int> shuffled(n);
  std::vector<int> classes(n);
  for (int i = 0; i < n; ++i) classes[static_cast<std::size_t>(i)] = i % 4;
  std::shuffle(classes.begin(), classes.end(), rng);
  std::vector<double> noise(static_cast<std::size_t>(400 * 20));
  for (double& v : noise) v = n01(rng);
  std::vector<int> noise_labels(400);
  for (int i = 0; i < 400; ++i) noise_labels[static_cast<std::size_t>(i)] = i % 4;
  const double chance = encoding_cluster_check(noise, 400, 20, noise_labels, 10, 5).accuracy;
  CHECK(std::abs(chance - 0.25) < 0.08);

  // Data already in 3 dimensions: all variance kept, distances preserved.
  std::vector<double> small(static_cast<std::size_t>(30 * 3));
  for (double& v : small) v = n01(rng);
  const Projection p = pca(small, 30, 3, 50);
  CHECK(p.components == 3);
  double total = 0.0, kept = 0.0;
  for (int j = 0; j < 3; ++j) {
    double m = 0.0, s = 0.0;
    for (int i = 0; i < 30; ++i) m += small[static_cast<std::size_t>(i * 3 + j)];
    m /= 30.0;
    for (int i = 0; i < 30; ++i) s += std::pow(small[static_cast<std::size_t>(i * 3 + j)] - m, 2);
    total += s / 29.0;
  }
  for (double e : p.explained) kept += e;
  CHECK(kept == doctest::Approx(total).epsilon(1e-12));
  const auto dist = [](const std::vector<double>& v, int dim, int a, int b) {
    double s = 0.0;
    for (int j = 0; j < dim; ++j) s += std::pow(v[static_cast<std::size_t>(a * dim + j)] - v[static_cast<std::size_t>(b * dim + j)], 2);
    return s;
  };
  CHECK(dist(p.coords, 3, 4, 17) == doctest::Approx(dist(small, 3, 4, 17)).epsilon(1e-12));

  // Rank-deficient data falls back to fewer components.
  std::vector<double> flat(static_cast<std::size_t>(20 * 5), 0.0);
  for (int i = 0; i < 20; ++i) flat[static_cast<std::size_t>(i * 5)] = i;
  const Projection q = pca(flat, 20, 5, 4);
  CHECK(q.components == 1);
  CHECK_FALSE(q.warning.empty());

  CHECK_THROWS_AS(encoding_cluster_check(x, n, d, std::vector<int>(n, 0), 50, n), Error);
}

TEST_CASE("analyses are pure") {
  const RegulationTrace t = random_full({120}, 3, 4, 12);
  const LayerSeries s = layer_series(t, 0);
  CHECK(modularity_histogram(activity_table(s)).counts == modularity_histogram(activity_table(s)).counts);
  CHECK(timelag_histogram(s).counts == timelag_histogram(s).counts);
}

TEST_CASE("csv output") {
  Histogram2D h;
  h.rows = h.cols = 2;
  h.counts = {0, 3, 1, 0};
  CHECK(histogram_csv(h) == "row,col,count\n0,1,3\n1,0,1\n");
  CHECK(series_csv({"x", "y"}, {{1, 2}, {0.5}}) == "x,y\n1,0.5\n2,\n");
}
