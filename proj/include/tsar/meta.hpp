#pragma once

// Online-aware meta-learning: an inner loop of sequential single-image SGD
// steps on one class, then an outer update of the starting parameters from a
// retention loss measured after the inner loop.

#include <array>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "tsar/data.hpp"
#include "tsar/model.hpp"
#include "tsar/tape.hpp"

namespace tsar {

struct MetaBatchSpec {
  int inner = 20;
  int retention_same = 20;
  int retention_other = 64;
};

struct MetaBatch {
  int inner_class = 0;
  std::vector<Sample> inner;
  std::vector<Sample> retention;
};

// Throws unless every class carries a train/test split and there are at
// least two classes.
void validate_meta_dataset(const ImageDataset& ds);

// Inner images: with replacement from the train split of one random class.
// Retention: `retention_same` from that class's test split plus
// `retention_other` from the pooled test splits of all other classes.
MetaBatch sample_meta_batch(const ImageDataset& ds, std::mt19937_64& rng, const MetaBatchSpec& spec = {});

enum class MetaOrder { kFirst, kSecond };
const char* meta_order_name(MetaOrder o);

// Loss for inner step `step` given the current parameters.
using StepLoss = std::function<Var(std::span<const Var> theta, int step)>;

struct Unrolled {
  std::vector<Var> theta;  // parameters after the last completed step
  int steps = 0;
  bool create_graph = false;
  bool finite = true;  // false when a step produced a non-finite loss
};

// theta_{k+1} = theta_k - lr * grad(loss_k) for the trainable entries. With
// create_graph the update is differentiable with respect to theta_0.
Unrolled unroll(std::span<const Var> theta0, const std::vector<bool>& trainable, const StepLoss& loss, int steps,
                double lr, bool create_graph);

// d outer_loss(theta_K) / d theta_0. Second order differentiates through the
// recorded trajectory; first order treats every inner gradient as a constant.
std::vector<Tensor> meta_gradient(std::span<const Var> theta0, const Unrolled& inner, Var outer_loss, MetaOrder order);

// Adam-style optimizer over a parameter list.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<Tensor> m, v;

  void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads, const std::vector<bool>& active, double lr);
};

// Model-level inner loop on a sample sequence. Requires the meta-inner freeze
// flags (regulator frozen).
Unrolled inner_loop(const TsarModel& model, std::span<const Var> theta0, const ImageDataset& ds,
                    std::span<const Sample> seq, double lr, bool create_graph);

// Mean cross-entropy over the samples, plus argmax accuracy.
Var mean_loss(const TsarModel& model, std::span<const Var> theta, const ImageDataset& ds, std::span<const Sample> samples,
              double* accuracy = nullptr);

struct MetaConfig {
  int iterations = 1000;
  double inner_lr = 1e-2;
  double outer_lr = 1e-3;
  MetaOrder order = MetaOrder::kSecond;
  MetaBatchSpec batch;
  int probe_size = 64;
  std::uint64_t seed = 0;
};

struct MetaLogRecord {
  int iter = 0;
  double retention_acc = 0.0;
  double retention_loss = 0.0;
  // p1, p25, p50, p75, p99 of all gates over the probe set, before this
  // iteration's update.
  std::array<double, 5> gate_percentiles{};
  double mean_gate = 0.0;
  double wallclock_ms = 0.0;
  bool aborted = false;
};

struct MetaState {
  TsarModel model;
  Adam adam;
  int iteration = 0;
  std::mt19937_64 rng;
};

struct OuterResult {
  double retention_loss = 0.0;
  double retention_acc = 0.0;
  bool aborted = false;
};

// One meta-iteration: inner loop on batch.inner, retention loss at the
// adapted parameters, outer update of all parameters. The inner adaptation
// is discarded.
OuterResult meta_step(MetaState& state, const ImageDataset& ds, const MetaBatch& batch, const MetaConfig& config);

// Probe images: a fixed sample drawn once per run.
std::vector<Sample> draw_probe(const ImageDataset& ds, int n, std::uint64_t seed);
// Percentiles and mean of all gates over the probe images.
std::pair<std::array<double, 5>, double> probe_gate_stats(const TsarModel& model, const ImageDataset& ds,
                                                          std::span<const Sample> probe);

TsarModel meta_train(TsarModel model, const ImageDataset& ds, const MetaConfig& config,
                     const std::function<void(const MetaLogRecord&)>& on_iteration = {});

}  // namespace tsar
