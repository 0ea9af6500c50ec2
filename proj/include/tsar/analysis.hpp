#pragma once

// Post-hoc analyses of regulation traces. Everything here is a pure function
// of its inputs.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsar/persist.hpp"

namespace tsar::analysis {

// Per-synapse gates of one layer, step-major: value(k, j) is synapse ids[j]
// at step record k.
struct LayerSeries {
  std::vector<std::int64_t> ids;
  std::vector<int> task;  // per step
  std::vector<double> values;

  std::size_t steps() const { return task.size(); }
  std::size_t synapses() const { return ids.size(); }
  double value(std::size_t k, std::size_t j) const { return values[k * ids.size() + j]; }
};

// Rejects summary traces and layers without per-synapse gates.
LayerSeries layer_series(const RegulationTrace& trace, int layer);

// Sorted distinct task ids of a trace.
std::vector<int> trace_tasks(const RegulationTrace& trace);

double task_specific_activity(const RegulationTrace& trace, int layer, std::int64_t synapse, int task);
double task_agnostic_activity(const RegulationTrace& trace, int layer, std::int64_t synapse, int task);

// Rank r in [1, n] (1 = most active, ties averaged) mapped to 5 log(r)/log(n).
std::vector<double> log_ranks(const std::vector<double>& activity);

struct ActivityTable {
  std::vector<std::int64_t> synapses;
  std::vector<int> tasks;
  // synapse-major: [j * tasks.size() + c]
  std::vector<double> specific;
  std::vector<double> agnostic;
  // Log-ranks among synapses, computed separately for each task.
  std::vector<double> specific_rank;
  std::vector<double> agnostic_rank;

  std::size_t index(std::size_t j, std::size_t c) const { return j * tasks.size() + c; }
};

ActivityTable activity_table(const LayerSeries& series);

struct Histogram2D {
  int rows = 0;
  int cols = 0;
  double row_lo = 0.0, row_hi = 1.0;
  double col_lo = 0.0, col_hi = 1.0;
  std::vector<std::uint64_t> counts;
  std::string warning;

  std::uint64_t at(int r, int c) const { return counts[static_cast<std::size_t>(r * cols + c)]; }
  std::uint64_t total() const;
};

// Bin of v in [lo, hi] over n equal bins; hi lands in the last bin.
int bin_of(double v, double lo, double hi, int n);

// Rows: task-specific log-rank, columns: task-agnostic log-rank, one entry
// per (synapse, task). Fewer synapses than `bins` coarsens to one bin per
// synapse.
Histogram2D modularity_histogram(const ActivityTable& table, int bins = 100);

// Synapse positions whose ascending rank of `score` falls in the centile band
// [lo, hi]. Ids are returned sorted.
std::vector<std::size_t> centile_band(const std::vector<double>& score, double lo, double hi);

// (gate at k, gate at k+1) over consecutive steps for synapses in the centile
// band of the task-agnostic mean (mean over tasks of task-specific activity).
Histogram2D timelag_histogram(const LayerSeries& series, double lo = 0.75, double hi = 0.99, int bins = 250);

enum class SyntheticKind { kModular, kRandom };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::kModular;
  int num_synapses = 1000;
  int num_tasks = 10;
  int per_task = 10;
  double random_mean = 0.5;
  double random_sd = 0.2;
};

// Single full-detail layer "S". Modular: synapse j belongs to module
// j mod num_tasks and carries a constant random gate on its own task, 0
// elsewhere. Random: clipped Gaussian gate per (synapse, step).
RegulationTrace synthetic_trace(const SyntheticSpec& spec, std::uint64_t seed);
int module_of(const SyntheticSpec& spec, std::int64_t synapse);

struct SpikeCounts {
  double threshold = 0.0;
  std::vector<int> per_step;           // synapses above threshold at each step
  std::map<int, std::uint64_t> freq;   // count -> number of steps
};

std::vector<SpikeCounts> spike_size_distribution(const LayerSeries& series, const std::vector<double>& thresholds = {
                                                                                  0.25, 0.5, 0.75, 0.9});

struct LogBin {
  double x = 0.0;        // geometric centre
  double density = 0.0;  // frequency per integer count in the bin
};

// Logarithmically spaced bins over positive counts; bins holding no integer
// or no mass are dropped.
std::vector<LogBin> log_binned(const std::map<int, double>& freq, int bins_per_decade = 5);
std::vector<LogBin> log_binned(const std::map<int, std::uint64_t>& freq, int bins_per_decade = 5);

enum class Regime { kSuppressantTruncated, kPowerLawLike, kSuperLinear, kIrregular };
const char* regime_name(Regime r);

struct PowerLawConfig {
  double min_r2 = 0.9;
  double slope_lo = -4.0;
  double slope_hi = -1.0;
};

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;  // log10 space
  double r2 = 0.0;
  int bins = 0;
  Regime regime = Regime::kIrregular;
  bool power_law() const { return regime == Regime::kPowerLawLike; }
};

// Least squares of log10 density on log10 x.
PowerLawFit powerlaw_fit(const std::vector<LogBin>& series, const PowerLawConfig& config = {});

struct CpSignReport {
  std::vector<double> upstream_spikes;  // per step
  std::vector<double> pos_mean;         // per step, mean CP gate over positive weights
  std::vector<double> neg_mean;
  LayerSummary pos_gates;  // pooled over all steps
  LayerSummary neg_gates;
  double corr_pos = 0.0;  // Pearson of first differences with upstream spikes
  double corr_neg = 0.0;
  std::int64_t positive = 0;  // sign census of the final CP weights
  std::int64_t negative = 0;
  std::int64_t zero = 0;
};

// Needs a full-detail trace. Upstream spikes at a step are the mean gate over
// the top `top_fraction` of upstream synapses, ranked by mean gate over the
// whole trace.
CpSignReport cp_sign_analysis(const RegulationTrace& trace, double top_fraction = 0.1);

struct Curve {
  std::vector<double> mean;
  std::vector<double> sd;
};

struct ClassNodeDynamics {
  // Percent change of the mean gate on weights into the current task's class
  // node, against the final step of the previous task.
  Curve within_pos, within_neg;
  // Percent change on weights into a finished task's node, against the final
  // step of that task, by steps elapsed since.
  Curve after_pos, after_neg;
  int runs = 0;
};

ClassNodeDynamics class_node_dynamics(const std::vector<RegulationTrace>& runs, int horizon = 0);

struct ClusterCheck {
  double accuracy = 0.0;
  int components = 0;
  std::vector<double> explained;  // variance per kept component
  std::string warning;
};

// Row-major n x d data projected onto its top principal components.
struct Projection {
  std::vector<double> coords;  // n x components
  int components = 0;
  std::vector<double> explained;
  std::string warning;
};
Projection pca(const std::vector<double>& data, int n, int d, int components);

// PCA to reduce_dims, then leave-one-out k-nearest-neighbour label accuracy.
ClusterCheck encoding_cluster_check(const std::vector<double>& data, int n, int d, const std::vector<int>& labels,
                                    int reduce_dims = 50, int k = 5);

// CSV writers. Histograms as (row, col, count) for non-empty cells.
std::string histogram_csv(const Histogram2D& h);
std::string series_csv(const std::vector<std::string>& header, const std::vector<std::vector<double>>& columns);

}  // namespace tsar::analysis
