#pragma once

// Domain transfer: sequential single-image SGD over a sequence of unseen
// classes, then retention on everything trained on.

#include <optional>
#include <random>
#include <vector>

#include "json.hpp"
#include "tsar/data.hpp"
#include "tsar/model.hpp"
#include "tsar/persist.hpp"

namespace tsar {

struct LabeledImage {
  const Tensor* image = nullptr;
  int label = 0;
};

// Fraction of argmax-correct predictions. Ties go to the lowest class index.
double evaluate(const TsarModel& model, std::span<const LabeledImage> items);

struct TransferConfig {
  int num_tasks = 20;
  int images_per_task = 10;
  int validation_per_class = 10;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  Treatment treatment = Treatment::kNormal;
  TraceDetail detail = TraceDetail::kSummary;
  // Tracked detail: synapses whose mean gate over the validation images lies
  // in this centile band, at most max_tracked per layer.
  double tracked_lo = 0.75;
  double tracked_hi = 0.99;
  int max_tracked = 2000;
};

nlohmann::json transfer_config_to_json(const TransferConfig& c);

// Images used for each task, as indices into the class's image list.
struct TaskPlan {
  std::vector<int> classes;                 // dataset class per task, in order
  std::vector<std::vector<int>> images;     // per task
  std::vector<std::vector<int>> validation;  // per task
};

// Random class order and images_per_task pool images per class, without
// replacement. The last validation_per_class images of each class are held
// out for validation.
TaskPlan plan_tasks(const ImageDataset& ds, const TransferConfig& config);

struct TransferResult {
  nlohmann::json config;
  std::vector<double> per_task_retention;
  // Entry t-1: accuracy on tasks 0..t-1 right after finishing task t.
  std::vector<double> past_task_curve;
  double final_retention = 0.0;
  double validation = 0.0;
  int steps = 0;
  bool diverged = false;
  RegulationTrace trace;
  std::string trace_path;

  nlohmann::json to_json() const;
};

// `model` must already be reset for transfer with num_tasks classes. When
// `plan` is given its tasks are used as-is.
TransferResult run_transfer(TsarModel& model, const ImageDataset& ds, const TransferConfig& config,
                            const TaskPlan* plan = nullptr);

// Copies `base`, prepares it for config.treatment (reset with a fresh
// num_tasks-class head, curated task plan, frozen regulation or a reservoir
// model) and runs the transfer.
TransferResult transfer_from(const TsarModel& base, const BiasMode& mode, const ImageDataset& ds,
                             const TransferConfig& config, std::uint64_t reset_seed);

// Freshly initialized regulation, never meta-trained, reset for transfer.
TsarModel reservoir_model(const ModelConfig& config, const BiasMode& mode, int num_tasks, std::uint64_t seed);

// Mean gate over all governed layers for each image.
double mean_regulation(const TsarModel& model, const Tensor& image);

struct CuratedTasks {
  TaskPlan plan;
  std::vector<bool> ties;  // per task: selection boundary fell inside a tie
  std::vector<int> from_enhancing;  // Mixed: per-task count drawn from the top set
};

// Enhancing: top images_per_task pool images by mean regulation, Diminishing:
// bottom, Mixed: images_per_task draws from the union, each draw picking
// either set with probability 1/2. The pool is every non-validation image.
CuratedTasks treatment_dataset(const TsarModel& model, const ImageDataset& ds, Treatment kind,
                               const TransferConfig& config);

struct GridRow {
  double lr = 0.0;
  double final_retention = 0.0;
  bool diverged = false;
};

struct GridResult {
  std::optional<double> best_lr;
  std::vector<GridRow> rows;
};

// Runs a transfer per distinct lr on a fresh copy of `model` and picks the
// highest final retention (ties toward the smaller lr). Divergent runs are
// flagged and excluded.
GridResult lr_grid_search(const TsarModel& model, const ImageDataset& ds, const TransferConfig& config,
                          std::vector<double> grid);

}  // namespace tsar
