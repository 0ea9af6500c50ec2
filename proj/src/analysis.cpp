#include "tsar/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "tsar/error.hpp"
#include "tsar/stats.hpp"

namespace tsar::analysis {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t task_position(const std::vector<int>& tasks, int task) {
  const auto it = std::lower_bound(tasks.begin(), tasks.end(), task);
  if (it == tasks.end() || *it != task) fail(ErrorKind::kInvalidArgument, "task " + std::to_string(task) + " not in trace");
  return static_cast<std::size_t>(it - tasks.begin());
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

LayerSeries layer_series(const RegulationTrace& trace, int layer) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= trace.layers.size()) {
    fail(ErrorKind::kInvalidArgument, "layer index " + std::to_string(layer) + " out of range");
  }
  if (trace.detail == TraceDetail::kSummary) {
    fail(ErrorKind::kInvalidArgument, "summary traces hold no per-synapse gates");
  }
  LayerSeries s;
  s.ids = trace.synapses(layer);
  s.values.reserve(trace.steps.size() * s.ids.size());
  for (const TraceStep& st : trace.steps) {
    const std::vector<double>& g = st.gates.at(static_cast<std::size_t>(layer));
    if (g.size() != s.ids.size()) fail(ErrorKind::kFormat, "step " + std::to_string(st.step) + ": gate count mismatch");
    s.values.insert(s.values.end(), g.begin(), g.end());
    s.task.push_back(st.task);
  }
  return s;
}

std::vector<int> trace_tasks(const RegulationTrace& trace) {
  std::vector<int> t;
  for (const TraceStep& s : trace.steps) t.push_back(s.task);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

double task_specific_activity(const RegulationTrace& trace, int layer, std::int64_t synapse, int task) {
  task_position(trace_tasks(trace), task);
  double sum = 0.0;
  int k = 0;
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    if (trace.steps[i].task != task) continue;
    sum += trace.gate(layer, synapse, i);
    ++k;
  }
  return sum / k;
}

double task_agnostic_activity(const RegulationTrace& trace, int layer, std::int64_t synapse, int task) {
  const std::vector<int> tasks = trace_tasks(trace);
  task_position(tasks, task);
  if (tasks.size() < 2) fail(ErrorKind::kInvalidArgument, "task-agnostic activity needs at least 2 tasks");
  double sum = 0.0;
  for (int t : tasks)
    if (t != task) sum += task_specific_activity(trace, layer, synapse, t);
  return sum / static_cast<double>(tasks.size() - 1);
}

std::vector<double> log_ranks(const std::vector<double>& activity) {
  std::vector<double> neg(activity.size());
  std::transform(activity.begin(), activity.end(), neg.begin(), [](double a) { return -a; });
  std::vector<double> r = stats::average_ranks(neg);
  const double ln = std::log(static_cast<double>(activity.size()));
  for (double& v : r) v = ln > 0.0 ? 5.0 * std::log(v) / ln : 0.0;
  return r;
}

namespace {

// Task-specific activity, synapse-major, for the sorted tasks of `series`.
std::vector<double> specific_activity(const LayerSeries& series, const std::vector<int>& tasks) {
  const std::size_t n = series.synapses(), T = tasks.size();
  std::vector<int> count(T, 0);
  std::vector<double> a(n * T, 0.0);
  for (std::size_t k = 0; k < series.steps(); ++k) {
    const std::size_t c = task_position(tasks, series.task[k]);
    ++count[c];
    for (std::size_t j = 0; j < n; ++j) a[j * T + c] += series.value(k, j);
  }
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < T; ++c) a[j * T + c] /= count[c];
  return a;
}

std::vector<int> series_tasks(const LayerSeries& series) {
  std::vector<int> t = series.task;
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

}  // namespace

ActivityTable activity_table(const LayerSeries& series) {
  ActivityTable t;
  t.synapses = series.ids;
  t.tasks = series_tasks(series);
  const std::size_t n = series.synapses(), T = t.tasks.size();
  if (T < 2) fail(ErrorKind::kInvalidArgument, "activity table needs at least 2 tasks");
  t.specific = specific_activity(series, t.tasks);
  t.agnostic.assign(n * T, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < T; ++c) {
      double other = 0.0;
      for (std::size_t c2 = 0; c2 < T; ++c2)
        if (c2 != c) other += t.specific[t.index(j, c2)];
      t.agnostic[t.index(j, c)] = other / static_cast<double>(T - 1);
    }
  }
  t.specific_rank.assign(n * T, 0.0);
  t.agnostic_rank.assign(n * T, 0.0);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < T; ++c) {
    for (std::size_t j = 0; j < n; ++j) col[j] = t.specific[t.index(j, c)];
    std::vector<double> r = log_ranks(col);
    for (std::size_t j = 0; j < n; ++j) t.specific_rank[t.index(j, c)] = r[j];
    for (std::size_t j = 0; j < n; ++j) col[j] = t.agnostic[t.index(j, c)];
    r = log_ranks(col);
    for (std::size_t j = 0; j < n; ++j) t.agnostic_rank[t.index(j, c)] = r[j];
  }
  return t;
}

std::uint64_t Histogram2D::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

int bin_of(double v, double lo, double hi, int n) {
  const double f = (v - lo) / (hi - lo);
  return std::clamp(static_cast<int>(std::floor(f * n)), 0, n - 1);
}

Histogram2D modularity_histogram(const ActivityTable& table, int bins) {
  if (bins < 1) fail(ErrorKind::kInvalidArgument, "modularity histogram needs at least one bin");
  Histogram2D h;
  const auto n = static_cast<int>(table.synapses.size());
  if (n < bins) {
    h.warning = "only " + std::to_string(n) + " synapses; using " + std::to_string(n) + " bins instead of " +
                std::to_string(bins);
    bins = std::max(n, 1);
  }
  h.rows = h.cols = bins;
  h.row_lo = h.col_lo = 0.0;
  h.row_hi = h.col_hi = 5.0;
  h.counts.assign(static_cast<std::size_t>(bins * bins), 0);
  for (std::size_t i = 0; i < table.specific_rank.size(); ++i) {
    const int r = bin_of(table.specific_rank[i], 0.0, 5.0, bins);
    const int c = bin_of(table.agnostic_rank[i], 0.0, 5.0, bins);
    ++h.counts[static_cast<std::size_t>(r * bins + c)];
  }
  return h;
}

std::vector<std::size_t> centile_band(const std::vector<double>& score, double lo, double hi) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo < hi)) fail(ErrorKind::kInvalidArgument, "centile band must satisfy 0 <= lo < hi <= 1");
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  const double n = static_cast<double>(score.size());
  const auto last = std::min(score.size(), static_cast<std::size_t>(std::ceil(hi * n)));
  const auto first = std::min(last, static_cast<std::size_t>(std::floor(lo * n)));
  std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(first),
                               order.begin() + static_cast<std::ptrdiff_t>(last));
  std::sort(ids.begin(), ids.end());
  return ids;
}

Histogram2D timelag_histogram(const LayerSeries& series, double lo, double hi, int bins) {
  if (series.steps() < 2) fail(ErrorKind::kInvalidArgument, "time-lag histogram needs at least 2 steps");
  const std::vector<int> tasks = series_tasks(series);
  const std::vector<double> a = specific_activity(series, tasks);
  const std::size_t T = tasks.size();
  std::vector<double> score(series.synapses(), 0.0);
  for (std::size_t j = 0; j < score.size(); ++j) {
    for (std::size_t c = 0; c < T; ++c) score[j] += a[j * T + c];
    score[j] /= static_cast<double>(T);
  }
  Histogram2D h;
  h.rows = h.cols = bins;
  h.counts.assign(static_cast<std::size_t>(bins * bins), 0);
  for (std::size_t j : centile_band(score, lo, hi)) {
    for (std::size_t k = 0; k + 1 < series.steps(); ++k) {
      const int r = bin_of(series.value(k, j), 0.0, 1.0, bins);
      const int c = bin_of(series.value(k + 1, j), 0.0, 1.0, bins);
      ++h.counts[static_cast<std::size_t>(r * bins + c)];
    }
  }
  return h;
}

int module_of(const SyntheticSpec& spec, std::int64_t synapse) {
  return static_cast<int>(synapse % spec.num_tasks);
}

RegulationTrace synthetic_trace(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_synapses < 1 || spec.num_tasks < 1 || spec.per_task < 1) {
    fail(ErrorKind::kInvalidArgument, "synthetic trace needs synapses, tasks and steps");
  }
  if (spec.kind == SyntheticKind::kModular && spec.num_synapses < spec.num_tasks) {
    fail(ErrorKind::kInvalidArgument, "modular trace needs at least one synapse per task");
  }
  std::mt19937_64 rng(seed);
  RegulationTrace t;
  t.detail = TraceDetail::kFull;
  t.layers = {TraceLayer{"S", Shape{spec.num_synapses}, {}}};
  t.meta = {{"synthetic", spec.kind == SyntheticKind::kModular ? "modular" : "random"},
            {"seed", seed},
            {"random_mean", spec.random_mean},
            {"random_sd", spec.random_sd}};
  const auto n = static_cast<std::size_t>(spec.num_synapses);
  std::vector<double> level(n);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (double& v : level) v = u(rng);
  std::normal_distribution<double> gauss(spec.random_mean, spec.random_sd);
  int step = 0;
  for (int task = 0; task < spec.num_tasks; ++task) {
    for (int i = 0; i < spec.per_task; ++i) {
      std::vector<double> g(n);
      for (std::size_t j = 0; j < n; ++j) {
        g[j] = spec.kind == SyntheticKind::kModular
                   ? (module_of(spec, static_cast<std::int64_t>(j)) == task ? level[j] : 0.0)
                   : std::clamp(gauss(rng), 0.0, 1.0);
      }
      TraceStep s;
      s.step = step++;
      s.task = task;
      s.label = task;
      s.image = i;
      s.summary = {summarize(g)};
      s.gates = {std::move(g)};
      t.steps.push_back(std::move(s));
    }
  }
  return t;
}

std::vector<SpikeCounts> spike_size_distribution(const LayerSeries& series, const std::vector<double>& thresholds) {
  std::vector<SpikeCounts> out;
  for (double th : thresholds) {
    if (!(th > 0.0 && th < 1.0)) fail(ErrorKind::kInvalidArgument, "burst thresholds must lie in (0,1)");
    SpikeCounts sc;
    sc.threshold = th;
    for (std::size_t k = 0; k < series.steps(); ++k) {
      int c = 0;
      for (std::size_t j = 0; j < series.synapses(); ++j) c += series.value(k, j) > th;
      sc.per_step.push_back(c);
      ++sc.freq[c];
    }
    out.push_back(std::move(sc));
  }
  return out;
}

std::vector<LogBin> log_binned(const std::map<int, double>& freq, int bins_per_decade) {
  if (bins_per_decade < 1) fail(ErrorKind::kInvalidArgument, "bins_per_decade must be >= 1");
  std::vector<LogBin> out;
  if (freq.empty()) return out;
  const int max_count = freq.rbegin()->first;
  if (max_count < 1) return out;
  const double step = 1.0 / bins_per_decade;
  for (int i = 0;; ++i) {
    const double e0 = std::pow(10.0, i * step), e1 = std::pow(10.0, (i + 1) * step);
    if (e0 > max_count) break;
    const int s0 = static_cast<int>(std::ceil(e0 - 1e-9));
    const int s1 = std::min(max_count, static_cast<int>(std::ceil(e1 - 1e-9)) - 1);  // last integer below e1
    if (s1 < s0) continue;
    double mass = 0.0;
    for (auto it = freq.lower_bound(s0); it != freq.end() && it->first <= s1; ++it) mass += it->second;
    if (mass <= 0.0) continue;
    out.push_back(LogBin{std::sqrt(static_cast<double>(s0) * s1), mass / (s1 - s0 + 1)});
  }
  return out;
}

std::vector<LogBin> log_binned(const std::map<int, std::uint64_t>& freq, int bins_per_decade) {
  std::map<int, double> f;
  for (const auto& [k, v] : freq) f[k] = static_cast<double>(v);
  return log_binned(f, bins_per_decade);
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kSuppressantTruncated: return "suppressant-truncated";
    case Regime::kPowerLawLike: return "power-law-like";
    case Regime::kSuperLinear: return "super-linear";
    case Regime::kIrregular: return "irregular";
  }
  return "?";
}

PowerLawFit powerlaw_fit(const std::vector<LogBin>& series, const PowerLawConfig& config) {
  std::vector<double> x, y;
  for (const LogBin& b : series) {
    if (b.x > 0.0 && b.density > 0.0) {
      x.push_back(std::log10(b.x));
      y.push_back(std::log10(b.density));
    }
  }
  if (x.size() < 3) fail(ErrorKind::kInvalidArgument, "power-law fit needs at least 3 non-empty bins, got " + std::to_string(x.size()));
  const double mx = stats::mean(x), my = stats::mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  PowerLawFit f;
  f.bins = static_cast<int>(x.size());
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  if (f.r2 >= config.min_r2 && f.slope >= config.slope_lo && f.slope <= config.slope_hi) {
    f.regime = Regime::kPowerLawLike;
  } else if (f.slope < config.slope_lo) {
    f.regime = Regime::kSuppressantTruncated;
  } else if (f.slope > config.slope_hi) {
    f.regime = Regime::kSuperLinear;
  } else {
    f.regime = Regime::kIrregular;
  }
  return f;
}

namespace {

std::vector<double> first_difference(const std::vector<double>& v) {
  std::vector<double> d;
  for (std::size_t i = 1; i < v.size(); ++i) d.push_back(v[i] - v[i - 1]);
  return d;
}

int cp_layer(const RegulationTrace& trace) {
  for (std::size_t l = 0; l < trace.layers.size(); ++l)
    if (trace.layers[l].name == "CP") return static_cast<int>(l);
  fail(ErrorKind::kInvalidArgument, "trace has no CP gates");
}

void need_cp_weights(const RegulationTrace& trace, int cp) {
  if (trace.detail != TraceDetail::kFull) fail(ErrorKind::kInvalidArgument, "CP analysis needs a full-detail trace");
  const auto n = static_cast<std::size_t>(trace.layers[static_cast<std::size_t>(cp)].size());
  for (const TraceStep& s : trace.steps) {
    if (s.cp_weights.size() != n) {
      fail(ErrorKind::kInvalidArgument, "step " + std::to_string(s.step) + ": CP weight snapshot missing or mis-sized");
    }
  }
}

// Mean gate over entries [begin, end) of the CP layer whose weight has the
// given sign; NaN when none do.
double signed_mean(const TraceStep& s, int cp, std::size_t begin, std::size_t end, int sign) {
  const std::vector<double>& g = s.gates[static_cast<std::size_t>(cp)];
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const double w = s.cp_weights[i];
    if ((sign > 0 && w > 0.0) || (sign < 0 && w < 0.0)) {
      sum += g[i];
      ++n;
    }
  }
  return n ? sum / n : kNaN;
}

}  // namespace

CpSignReport cp_sign_analysis(const RegulationTrace& trace, double top_fraction) {
  const int cp = cp_layer(trace);
  need_cp_weights(trace, cp);
  if (trace.steps.size() < 3) fail(ErrorKind::kInvalidArgument, "CP analysis needs at least 3 steps");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) fail(ErrorKind::kInvalidArgument, "top_fraction must be in (0,1]");
  CpSignReport r;
  const std::size_t steps = trace.steps.size();

  // Upstream synapses ranked by mean gate, pooled over every non-CP layer.
  struct Ref {
    std::size_t layer, index;
    double mean;
  };
  std::vector<Ref> up;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    if (static_cast<int>(l) == cp) continue;
    const std::size_t n = trace.steps[0].gates[l].size();
    for (std::size_t i = 0; i < n; ++i) {
      double m = 0.0;
      for (const TraceStep& s : trace.steps) m += s.gates[l][i];
      up.push_back(Ref{l, i, m / static_cast<double>(steps)});
    }
  }
  if (up.empty()) fail(ErrorKind::kInvalidArgument, "trace has no upstream layers");
  std::stable_sort(up.begin(), up.end(), [](const Ref& a, const Ref& b) { return a.mean > b.mean; });
  const auto top = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(up.size()))));
  up.resize(top);

  std::vector<double> pos_pool, neg_pool;
  const std::size_t ncp = trace.steps[0].cp_weights.size();
  for (const TraceStep& s : trace.steps) {
    double u = 0.0;
    for (const Ref& ref : up) u += s.gates[ref.layer][ref.index];
    r.upstream_spikes.push_back(u / static_cast<double>(top));
    r.pos_mean.push_back(signed_mean(s, cp, 0, ncp, 1));
    r.neg_mean.push_back(signed_mean(s, cp, 0, ncp, -1));
    const std::vector<double>& g = s.gates[static_cast<std::size_t>(cp)];
    for (std::size_t i = 0; i < ncp; ++i) {
      if (s.cp_weights[i] > 0.0) pos_pool.push_back(g[i]);
      if (s.cp_weights[i] < 0.0) neg_pool.push_back(g[i]);
    }
  }
  r.pos_gates = summarize(pos_pool);
  r.neg_gates = summarize(neg_pool);
  const std::vector<double> du = first_difference(r.upstream_spikes);
  const auto corr = [&](const std::vector<double>& series) {
    if (std::any_of(series.begin(), series.end(), [](double v) { return std::isnan(v); })) return kNaN;
    return stats::pearson(du, first_difference(series));
  };
  r.corr_pos = corr(r.pos_mean);
  r.corr_neg = corr(r.neg_mean);
  for (double w : trace.steps.back().cp_weights) {
    if (w > 0.0) {
      ++r.positive;
    } else if (w < 0.0) {
      ++r.negative;
    } else {
      ++r.zero;
    }
  }
  return r;
}

namespace {

struct RunCurves {
  std::vector<double> within_pos, within_neg, after_pos, after_neg;
};

double percent(double v, double ref) { return (std::isnan(v) || std::isnan(ref) || ref == 0.0) ? kNaN : 100.0 * (v - ref) / ref; }

// Accumulates a per-offset mean skipping NaNs.
struct Accum {
  std::vector<double> sum;
  std::vector<int> n;
  explicit Accum(std::size_t len) : sum(len, 0.0), n(len, 0) {}
  void add(std::size_t i, double v) {
    if (std::isnan(v)) return;
    sum[i] += v;
    ++n[i];
  }
  std::vector<double> mean() const {
    std::vector<double> m(sum.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = n[i] ? sum[i] / n[i] : kNaN;
    return m;
  }
};

Curve across_runs(const std::vector<std::vector<double>>& per_run) {
  Curve c;
  const std::size_t len = per_run.front().size();
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> v;
    for (const auto& r : per_run)
      if (!std::isnan(r[i])) v.push_back(r[i]);
    c.mean.push_back(v.empty() ? kNaN : stats::mean(v));
    c.sd.push_back(v.size() < 2 ? 0.0 : stats::stddev(v));
  }
  return c;
}

}  // namespace

ClassNodeDynamics class_node_dynamics(const std::vector<RegulationTrace>& runs, int horizon) {
  if (runs.size() < 2) fail(ErrorKind::kInvalidArgument, "class-node dynamics needs at least 2 runs");
  const RegulationTrace& first = runs.front();
  const int cp = cp_layer(first);
  const Shape cp_shape = first.layers[static_cast<std::size_t>(cp)].shape;
  if (cp_shape.size() != 2) fail(ErrorKind::kInvalidArgument, "CP gates must be (classes, inputs)");
  const auto width = static_cast<std::size_t>(cp_shape[1]);

  // Task boundaries: [start, end) per task in order of appearance.
  const auto boundaries = [](const RegulationTrace& t) {
    std::vector<std::pair<std::size_t, std::size_t>> b;
    for (std::size_t k = 0; k < t.steps.size(); ++k) {
      if (k == 0 || t.steps[k].task != t.steps[k - 1].task) b.push_back({k, k});
      b.back().second = k + 1;
    }
    return b;
  };
  const auto bounds0 = boundaries(first);
  for (const RegulationTrace& t : runs) {
    const int c = cp_layer(t);
    need_cp_weights(t, c);
    if (t.layers[static_cast<std::size_t>(c)].shape != cp_shape || t.steps.size() != first.steps.size() ||
        boundaries(t) != bounds0) {
      fail(ErrorKind::kInvalidArgument, "runs are not aligned (task count, task lengths or CP shape differ)");
    }
  }
  if (bounds0.size() < 2) fail(ErrorKind::kInvalidArgument, "class-node dynamics needs at least 2 tasks");
  std::size_t task_len = std::numeric_limits<std::size_t>::max();
  for (const auto& [b, e] : bounds0) task_len = std::min(task_len, e - b);
  const std::size_t max_after = first.steps.size() - bounds0.front().second;
  const std::size_t after_len = horizon > 0 ? std::min<std::size_t>(static_cast<std::size_t>(horizon), max_after) : max_after;

  std::vector<std::vector<double>> wp, wn, ap, an;
  for (const RegulationTrace& t : runs) {
    const int c = cp_layer(t);
    Accum within_p(task_len), within_n(task_len), after_p(after_len), after_n(after_len);
    for (std::size_t ti = 0; ti < bounds0.size(); ++ti) {
      const auto [b, e] = bounds0[ti];
      const auto node = static_cast<std::size_t>(t.steps[b].label);
      if (node >= static_cast<std::size_t>(cp_shape[0])) fail(ErrorKind::kInvalidArgument, "label outside the CP layer");
      const std::size_t lo = node * width, hi = lo + width;
      if (ti > 0) {
        const TraceStep& ref = t.steps[bounds0[ti - 1].second - 1];
        const double rp = signed_mean(ref, c, lo, hi, 1), rn = signed_mean(ref, c, lo, hi, -1);
        for (std::size_t o = 0; o < task_len; ++o) {
          within_p.add(o, percent(signed_mean(t.steps[b + o], c, lo, hi, 1), rp));
          within_n.add(o, percent(signed_mean(t.steps[b + o], c, lo, hi, -1), rn));
        }
      }
      const TraceStep& end = t.steps[e - 1];
      const double rp = signed_mean(end, c, lo, hi, 1), rn = signed_mean(end, c, lo, hi, -1);
      for (std::size_t l = 1; l <= after_len && e - 1 + l < t.steps.size(); ++l) {
        after_p.add(l - 1, percent(signed_mean(t.steps[e - 1 + l], c, lo, hi, 1), rp));
        after_n.add(l - 1, percent(signed_mean(t.steps[e - 1 + l], c, lo, hi, -1), rn));
      }
    }
    wp.push_back(within_p.mean());
    wn.push_back(within_n.mean());
    ap.push_back(after_p.mean());
    an.push_back(after_n.mean());
  }
  ClassNodeDynamics d;
  d.runs = static_cast<int>(runs.size());
  d.within_pos = across_runs(wp);
  d.within_neg = across_runs(wn);
  d.after_pos = across_runs(ap);
  d.after_neg = across_runs(an);
  return d;
}

Projection pca(const std::vector<double>& data, int n, int d, int components) {
  if (n < 2 || d < 1 || data.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(d)) {
    fail(ErrorKind::kInvalidArgument, "pca: need an n x d matrix with n >= 2");
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat x = Eigen::Map<const Mat>(data.data(), n, d);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd vals = eig.eigenvalues().reverse();
  const Eigen::MatrixXd vecs = eig.eigenvectors().rowwise().reverse();
  Projection p;
  int keep = std::min({components, d, n - 1});
  const double top = std::max(vals(0), 0.0);
  int usable = 0;
  while (usable < keep && vals(usable) > 1e-12 * top && vals(usable) > 0.0) ++usable;
  if (usable < keep) {
    p.warning = "covariance has rank " + std::to_string(usable) + "; keeping " + std::to_string(usable) +
                " of " + std::to_string(keep) + " components";
    keep = std::max(usable, 1);
  }
  p.components = keep;
  const Mat proj = x * vecs.leftCols(keep);
  p.coords.assign(proj.data(), proj.data() + proj.size());
  for (int i = 0; i < keep; ++i) p.explained.push_back(vals(i));
  return p;
}

ClusterCheck encoding_cluster_check(const std::vector<double>& data, int n, int d, const std::vector<int>& labels,
                                    int reduce_dims, int k) {
  if (static_cast<int>(labels.size()) != n) fail(ErrorKind::kInvalidArgument, "one label per encoding required");
  if (k < 1) fail(ErrorKind::kInvalidArgument, "k must be >= 1");
  std::map<int, int> per_label;
  for (int l : labels) ++per_label[l];
  for (const auto& [l, c] : per_label) {
    if (c < k + 1) {
      fail(ErrorKind::kInvalidArgument, "label " + std::to_string(l) + " has " + std::to_string(c) +
                                            " encodings, needs at least k+1 = " + std::to_string(k + 1));
    }
  }
  const Projection p = pca(data, n, d, reduce_dims);
  ClusterCheck out;
  out.components = p.components;
  out.explained = p.explained;
  out.warning = p.warning;
  const auto m = static_cast<std::size_t>(p.components);
  int correct = 0;
  std::vector<std::pair<double, int>> dist;
  for (int i = 0; i < n; ++i) {
    dist.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        const double diff = p.coords[static_cast<std::size_t>(i) * m + c] - p.coords[static_cast<std::size_t>(j) * m + c];
        s += diff * diff;
      }
      dist.push_back({s, j});
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::map<int, int> votes;
    for (int q = 0; q < k; ++q) ++votes[labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(q)].second)]];
    int best = -1, best_votes = 0;
    // Vote ties go to the label with the nearest member.
    for (int q = 0; q < k; ++q) {
      const int l = labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(q)].second)];
      if (votes[l] > best_votes) {
        best_votes = votes[l];
        best = l;
      }
    }
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  out.accuracy = static_cast<double>(correct) / n;
  return out;
}

std::string histogram_csv(const Histogram2D& h) {
  std::ostringstream os;
  os << "row,col,count\n";
  for (int r = 0; r < h.rows; ++r)
    for (int c = 0; c < h.cols; ++c)
      if (h.at(r, c)) os << r << "," << c << "," << h.at(r, c) << "\n";
  return os.str();
}

std::string series_csv(const std::vector<std::string>& header, const std::vector<std::vector<double>>& columns) {
  if (header.size() != columns.size()) fail(ErrorKind::kInvalidArgument, "series_csv: header and columns differ");
  std::size_t rows = 0;
  for (const auto& c : columns) rows = std::max(rows, c.size());
  std::ostringstream os;
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) os << ",";
      if (r < columns[i].size()) os << fmt(columns[i][r]);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace tsar::analysis
