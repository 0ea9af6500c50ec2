#include "tsar/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tsar/analysis.hpp"
#include "tsar/error.hpp"
#include "tsar/ops.hpp"

namespace tsar {
using nlohmann::json;

double evaluate(const TsarModel& model, std::span<const LabeledImage> items) {
  if (items.empty()) fail(ErrorKind::kInvalidArgument, "evaluate: empty image set");
  int correct = 0;
  for (const LabeledImage& it : items) {
    const Tensor z = model.predict(*it.image);
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < z.numel(); ++j)
      if (z[j] > z[arg]) arg = j;
    correct += arg == it.label;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

json transfer_config_to_json(const TransferConfig& c) {
  return json{{"num_tasks", c.num_tasks},
              {"images_per_task", c.images_per_task},
              {"validation_per_class", c.validation_per_class},
              {"lr", c.lr},
              {"seed", c.seed},
              {"treatment", treatment_name(c.treatment)},
              {"trace_detail", trace_detail_name(c.detail)},
              {"tracked_band", {c.tracked_lo, c.tracked_hi}},
              {"max_tracked", c.max_tracked}};
}

json TransferResult::to_json() const {
  return json{{"config", config},
              {"per_task_retention", per_task_retention},
              {"past_task_curve", past_task_curve},
              {"final_retention", final_retention},
              {"validation", validation},
              {"steps", steps},
              {"diverged", diverged},
              {"trace_path", trace_path}};
}

TaskPlan plan_tasks(const ImageDataset& ds, const TransferConfig& config) {
  if (config.num_tasks < 1 || config.images_per_task < 1) fail(ErrorKind::kConfig, "transfer needs tasks and images");
  if (config.validation_per_class < 0) fail(ErrorKind::kConfig, "validation_per_class must be >= 0");
  if (static_cast<std::size_t>(config.num_tasks) > ds.num_classes()) {
    fail(ErrorKind::kConfig, std::to_string(config.num_tasks) + " tasks requested, dataset has " +
                                 std::to_string(ds.num_classes()) + " classes");
  }
  std::mt19937_64 rng(config.seed);
  std::vector<int> order(ds.num_classes());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  TaskPlan plan;
  for (int t = 0; t < config.num_tasks; ++t) {
    const int c = order[static_cast<std::size_t>(t)];
    const int n = static_cast<int>(ds.images[static_cast<std::size_t>(c)].size());
    const int pool = n - config.validation_per_class;
    if (pool < config.images_per_task) {
      fail(ErrorKind::kConfig, "class " + ds.class_names[static_cast<std::size_t>(c)] + ": pool of " +
                                   std::to_string(std::max(pool, 0)) + " images is smaller than images_per_task " +
                                   std::to_string(config.images_per_task));
    }
    std::vector<int> idx(static_cast<std::size_t>(pool));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(config.images_per_task));
    std::vector<int> val(static_cast<std::size_t>(config.validation_per_class));
    std::iota(val.begin(), val.end(), pool);
    plan.classes.push_back(c);
    plan.images.push_back(std::move(idx));
    plan.validation.push_back(std::move(val));
  }
  return plan;
}

namespace {

struct StepOutcome {
  double loss = 0.0;
  std::vector<Tensor> gates;
};

StepOutcome sgd_step(TsarModel& model, const Tensor& image, int label, double lr) {
  Tape tape;
  std::vector<Var> bound;
  std::vector<Var> targets;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const Parameter& p = model.params()[i];
    if (p.frozen) {
      bound.push_back(tape.constant(p.value));
    } else {
      bound.push_back(tape.leaf(p.value));
      targets.push_back(bound.back());
      where.push_back(i);
    }
  }
  Var img = tape.constant(image);
  StepOutcome out;
  Var logits;
  if (model.has_regulator()) {
    const GateVars g = model.regulate(bound, img);
    for (const Var& v : g.gates) out.gates.push_back(v.value());
    logits = model.forward(bound, img, &g);
  } else {
    logits = model.forward(bound, img, nullptr);
  }
  const int labels[1] = {label};
  Var loss = ops::softmax_xent(logits, labels);
  out.loss = loss.value().item();
  if (!std::isfinite(out.loss)) return out;
  const GradResult g = grad(loss, targets);
  for (std::size_t j = 0; j < where.size(); ++j) {
    if (g.detached[j]) continue;
    Tensor& p = model.params()[where[j]].value;
    const Tensor& d = g.grads[j].value();
    for (std::int64_t k = 0; k < p.numel(); ++k) {
      p[k] -= lr * d[k];
      if (!std::isfinite(p[k])) out.loss = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return out;
}

std::vector<std::int64_t> band_ids(const std::vector<double>& means, double lo, double hi, int max_ids) {
  std::vector<std::int64_t> ids;
  for (std::size_t i : analysis::centile_band(means, lo, hi)) ids.push_back(static_cast<std::int64_t>(i));
  if (max_ids > 0 && ids.size() > static_cast<std::size_t>(max_ids)) {
    std::vector<std::int64_t> thin;
    const double stride = static_cast<double>(ids.size()) / max_ids;
    for (int i = 0; i < max_ids; ++i) thin.push_back(ids[static_cast<std::size_t>(i * stride)]);
    ids = std::move(thin);
  }
  return ids;
}

}  // namespace

TransferResult run_transfer(TsarModel& model, const ImageDataset& ds, const TransferConfig& config,
                            const TaskPlan* plan_in) {
  if (config.tracked_lo < 0.0 || config.tracked_hi > 1.0 || config.tracked_lo >= config.tracked_hi) {
    fail(ErrorKind::kConfig, "tracked band must satisfy 0 <= lo < hi <= 1");
  }
  const TaskPlan plan = plan_in ? *plan_in : plan_tasks(ds, config);
  const int tasks = static_cast<int>(plan.classes.size());
  if (model.num_classes() != tasks) {
    fail(ErrorKind::kConfig, "model predicts " + std::to_string(model.num_classes()) + " classes for " +
                                 std::to_string(tasks) + " tasks; reset it for transfer first");
  }
  TransferResult res;
  res.config = transfer_config_to_json(config);
  RegulationTrace& trace = res.trace;
  trace.detail = config.detail;
  trace.meta = json{{"transfer", res.config}, {"variant", variant_name(model.variant())}};
  const std::vector<Shape> shapes = model.gate_shapes();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const std::string name = model.variant() == Variant::kAnmlStyle ? "R" : TsarModel::kLayerNames[l];
    trace.layers.push_back(TraceLayer{name, shapes[l], {}});
  }
  if (config.detail == TraceDetail::kTracked && !shapes.empty()) {
    std::vector<std::vector<double>> sums(shapes.size());
    int probes = 0;
    for (std::size_t t = 0; t < plan.validation.size() && probes < 20; ++t) {
      for (int idx : plan.validation[t]) {
        if (probes >= 20) break;
        const GateSet g = model.regulate(ds.images[static_cast<std::size_t>(plan.classes[t])][static_cast<std::size_t>(idx)]).second;
        for (std::size_t l = 0; l < shapes.size(); ++l) {
          sums[l].resize(static_cast<std::size_t>(g.gates[l].numel()));
          for (std::int64_t i = 0; i < g.gates[l].numel(); ++i) sums[l][static_cast<std::size_t>(i)] += g.gates[l][i];
        }
        ++probes;
      }
    }
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      if (sums[l].empty()) sums[l].assign(static_cast<std::size_t>(numel_of(shapes[l])), 0.0);
      trace.layers[l].tracked = band_ids(sums[l], config.tracked_lo, config.tracked_hi, config.max_tracked);
    }
  }

  const auto task_items = [&](int t) {
    const auto& imgs = ds.images[static_cast<std::size_t>(plan.classes[static_cast<std::size_t>(t)])];
    std::vector<LabeledImage> v;
    for (int idx : plan.images[static_cast<std::size_t>(t)]) v.push_back({&imgs[static_cast<std::size_t>(idx)], t});
    return v;
  };
  std::vector<LabeledImage> past;
  int step = 0;
  for (int t = 0; t < tasks && !res.diverged; ++t) {
    if (t > 0) {
      const std::vector<LabeledImage> prev = task_items(t - 1);
      past.insert(past.end(), prev.begin(), prev.end());
    }
    const auto& imgs = ds.images[static_cast<std::size_t>(plan.classes[static_cast<std::size_t>(t)])];
    for (int idx : plan.images[static_cast<std::size_t>(t)]) {
      const StepOutcome o = sgd_step(model, imgs[static_cast<std::size_t>(idx)], t, config.lr);
      if (!std::isfinite(o.loss)) {
        res.diverged = true;
        break;
      }
      TraceStep rec;
      rec.step = step;
      rec.task = t;
      rec.label = t;
      rec.image = idx;
      for (std::size_t l = 0; l < o.gates.size(); ++l) {
        rec.summary.push_back(summarize(o.gates[l].data()));
        if (config.detail == TraceDetail::kFull) {
          rec.gates.emplace_back(o.gates[l].data().begin(), o.gates[l].data().end());
        } else if (config.detail == TraceDetail::kTracked) {
          std::vector<double> v;
          for (std::int64_t id : trace.layers[l].tracked) v.push_back(o.gates[l][id]);
          rec.gates.push_back(std::move(v));
        }
      }
      if (config.detail == TraceDetail::kFull) {
        const Tensor& w = model.param("clf.cp.w");
        rec.cp_weights.assign(w.data().begin(), w.data().end());
      }
      trace.steps.push_back(std::move(rec));
      ++step;
    }
    if (t > 0 && !res.diverged) res.past_task_curve.push_back(evaluate(model, past));
  }
  res.steps = step;
  if (res.diverged) return res;

  std::vector<LabeledImage> all, val;
  for (int t = 0; t < tasks; ++t) {
    const auto& imgs = ds.images[static_cast<std::size_t>(plan.classes[static_cast<std::size_t>(t)])];
    const std::vector<LabeledImage> mine = task_items(t);
    res.per_task_retention.push_back(evaluate(model, mine));
    all.insert(all.end(), mine.begin(), mine.end());
    for (int idx : plan.validation[static_cast<std::size_t>(t)]) val.push_back({&imgs[static_cast<std::size_t>(idx)], t});
  }
  res.final_retention = evaluate(model, all);
  res.validation = val.empty() ? 0.0 : evaluate(model, val);
  return res;
}

TsarModel reservoir_model(const ModelConfig& config, const BiasMode& mode, int num_tasks, std::uint64_t seed) {
  TsarModel m = TsarModel::build(config, seed);
  if (!m.has_regulator()) fail(ErrorKind::kInvalidArgument, "reservoir needs a variant with a regulator");
  m.init_regulation_bias(mode);
  m.reset_for_transfer(num_tasks, mode, Treatment::kReservoir, seed + 1);
  return m;
}

double mean_regulation(const TsarModel& model, const Tensor& image) {
  if (!model.has_regulator()) fail(ErrorKind::kInvalidArgument, "mean_regulation: model has no regulator");
  return model.regulate(image).second.mean();
}

CuratedTasks treatment_dataset(const TsarModel& model, const ImageDataset& ds, Treatment kind,
                               const TransferConfig& config) {
  if (kind != Treatment::kEnhancing && kind != Treatment::kDiminishing && kind != Treatment::kMixed) {
    fail(ErrorKind::kInvalidArgument, std::string("treatment_dataset: ") + treatment_name(kind) + " is not a curation");
  }
  TransferConfig probe = config;
  probe.images_per_task = 1;
  CuratedTasks out;
  out.plan = plan_tasks(ds, probe);
  const int per = config.images_per_task;
  std::mt19937_64 rng(config.seed ^ 0x6d69786564ULL);
  out.plan.images.clear();
  for (std::size_t t = 0; t < out.plan.classes.size(); ++t) {
    const auto& imgs = ds.images[static_cast<std::size_t>(out.plan.classes[t])];
    const int pool = static_cast<int>(imgs.size()) - config.validation_per_class;
    if (pool < 2 * per) {
      fail(ErrorKind::kConfig, "class " + ds.class_names[static_cast<std::size_t>(out.plan.classes[t])] + ": pool of " +
                                   std::to_string(pool) + " images, curation needs " + std::to_string(2 * per));
    }
    std::vector<double> means(static_cast<std::size_t>(pool));
    for (int i = 0; i < pool; ++i) means[static_cast<std::size_t>(i)] = mean_regulation(model, imgs[static_cast<std::size_t>(i)]);
    std::vector<int> order(static_cast<std::size_t>(pool));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return means[static_cast<std::size_t>(a)] > means[static_cast<std::size_t>(b)];
    });
    const std::vector<int> top(order.begin(), order.begin() + per);
    const std::vector<int> bottom(order.end() - per, order.end());
    const auto m = [&](int i) { return means[static_cast<std::size_t>(i)]; };
    bool tie = false;
    if (kind == Treatment::kEnhancing || kind == Treatment::kMixed) tie |= m(order[static_cast<std::size_t>(per - 1)]) == m(order[static_cast<std::size_t>(per)]);
    if (kind == Treatment::kDiminishing || kind == Treatment::kMixed) {
      tie |= m(order[static_cast<std::size_t>(pool - per)]) == m(order[static_cast<std::size_t>(pool - per - 1)]);
    }
    out.ties.push_back(tie);
    std::vector<int> chosen;
    int from_top = 0;
    if (kind == Treatment::kEnhancing) {
      chosen = top;
    } else if (kind == Treatment::kDiminishing) {
      chosen = bottom;
    } else {
      std::vector<int> a = top, b = bottom;
      std::shuffle(a.begin(), a.end(), rng);
      std::shuffle(b.begin(), b.end(), rng);
      std::bernoulli_distribution coin(0.5);
      std::size_t ia = 0, ib = 0;
      for (int k = 0; k < per; ++k) {
        if (coin(rng)) {
          chosen.push_back(a[ia++]);
          ++from_top;
        } else {
          chosen.push_back(b[ib++]);
        }
      }
      std::shuffle(chosen.begin(), chosen.end(), rng);
    }
    out.from_enhancing.push_back(kind == Treatment::kEnhancing ? per : from_top);
    out.plan.images.push_back(std::move(chosen));
  }
  return out;
}

GridResult lr_grid_search(const TsarModel& model, const ImageDataset& ds, const TransferConfig& config,
                          std::vector<double> grid) {
  if (grid.empty()) fail(ErrorKind::kConfig, "lr grid is empty");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  GridResult out;
  double best = -1.0;
  for (double lr : grid) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorKind::kConfig, "lr grid entries must be finite and >= 0");
    TsarModel m = model;
    TransferConfig c = config;
    c.lr = lr;
    c.detail = TraceDetail::kSummary;
    const TransferResult r = run_transfer(m, ds, c);
    out.rows.push_back(GridRow{lr, r.final_retention, r.diverged});
    if (!r.diverged && r.final_retention > best) {
      best = r.final_retention;
      out.best_lr = lr;
    }
  }
  return out;
}

TransferResult transfer_from(const TsarModel& base, const BiasMode& mode, const ImageDataset& ds,
                             const TransferConfig& config, std::uint64_t reset_seed) {
  switch (config.treatment) {
    case Treatment::kReservoir: {
      TsarModel m = reservoir_model(base.config(), mode, config.num_tasks, reset_seed);
      return run_transfer(m, ds, config);
    }
    case Treatment::kEnhancing:
    case Treatment::kDiminishing:
    case Treatment::kMixed: {
      TsarModel m = base;
      m.reset_for_transfer(config.num_tasks, mode, Treatment::kNormal, reset_seed);
      const CuratedTasks tasks = treatment_dataset(m, ds, config.treatment, config);
      TransferResult r = run_transfer(m, ds, config, &tasks.plan);
      r.config["boundary_ties"] = std::count(tasks.ties.begin(), tasks.ties.end(), true);
      if (config.treatment == Treatment::kMixed) r.config["from_enhancing"] = tasks.from_enhancing;
      return r;
    }
    case Treatment::kNormal:
    case Treatment::kFixed: {
      TsarModel m = base;
      m.reset_for_transfer(config.num_tasks, mode, config.treatment, reset_seed);
      return run_transfer(m, ds, config);
    }
  }
  fail(ErrorKind::kConfig, "unknown treatment");
}

}  // namespace tsar
