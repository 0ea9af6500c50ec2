#include "tsar/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "tsar/error.hpp"
#include "tsar/ops.hpp"

namespace tsar {

void validate_meta_dataset(const ImageDataset& ds) {
  if (ds.num_classes() < 2) fail(ErrorKind::kConfig, "meta dataset needs at least 2 classes");
  if (ds.train_per_class < 1 || ds.test_per_class < 1) {
    fail(ErrorKind::kConfig, "meta dataset has no train/test split");
  }
  const std::size_t need = static_cast<std::size_t>(ds.train_per_class + ds.test_per_class);
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    if (ds.images[c].size() < need) {
      fail(ErrorKind::kConfig, "class " + ds.class_names[c] + " has " + std::to_string(ds.images[c].size()) +
                                   " images, split needs " + std::to_string(need));
    }
  }
}

MetaBatch sample_meta_batch(const ImageDataset& ds, std::mt19937_64& rng, const MetaBatchSpec& spec) {
  validate_meta_dataset(ds);
  const int k = static_cast<int>(ds.num_classes());
  const int tr = ds.train_per_class, te = ds.test_per_class;
  MetaBatch b;
  b.inner_class = std::uniform_int_distribution<int>(0, k - 1)(rng);
  std::uniform_int_distribution<int> pick_train(0, tr - 1), pick_test(0, te - 1);
  for (int i = 0; i < spec.inner; ++i) b.inner.push_back({b.inner_class, pick_train(rng)});
  for (int i = 0; i < spec.retention_same; ++i) b.retention.push_back({b.inner_class, tr + pick_test(rng)});
  // Uniform over the pooled test images of the other classes.
  std::uniform_int_distribution<int> pick_other(0, (k - 1) * te - 1);
  for (int i = 0; i < spec.retention_other; ++i) {
    const int flat = pick_other(rng);
    int cls = flat / te;
    if (cls >= b.inner_class) ++cls;
    b.retention.push_back({cls, tr + flat % te});
  }
  return b;
}

const char* meta_order_name(MetaOrder o) { return o == MetaOrder::kFirst ? "first" : "second"; }

Unrolled unroll(std::span<const Var> theta0, const std::vector<bool>& trainable, const StepLoss& loss, int steps,
                double lr, bool create_graph) {
  if (trainable.size() != theta0.size()) fail(ErrorKind::kInvalidArgument, "unroll: mask size mismatch");
  Unrolled out;
  out.theta.assign(theta0.begin(), theta0.end());
  out.create_graph = create_graph;
  std::vector<Var> targets;
  std::vector<std::size_t> where;
  for (int k = 0; k < steps; ++k) {
    Var l = loss(out.theta, k);
    if (!std::isfinite(l.value().item())) {
      out.finite = false;
      return out;
    }
    targets.clear();
    where.clear();
    for (std::size_t i = 0; i < out.theta.size(); ++i) {
      if (!trainable[i]) continue;
      targets.push_back(out.theta[i]);
      where.push_back(i);
    }
    const GradResult g = grad(l, targets, GradMode{create_graph});
    for (std::size_t j = 0; j < where.size(); ++j) {
      if (g.detached[j]) continue;
      Var& th = out.theta[where[j]];
      th = ops::sub(th, ops::affine(g.grads[j], lr, 0.0));
    }
    out.steps = k + 1;
  }
  return out;
}

std::vector<Tensor> meta_gradient(std::span<const Var> theta0, const Unrolled& inner, Var outer_loss, MetaOrder order) {
  if (order == MetaOrder::kSecond && !inner.create_graph) {
    fail(ErrorKind::kInvalidArgument, "second-order meta-gradient needs an inner loop recorded with create_graph");
  }
  if (order == MetaOrder::kFirst && inner.create_graph) {
    fail(ErrorKind::kInvalidArgument, "first-order meta-gradient needs an inner loop recorded without create_graph");
  }
  const GradResult g = grad(outer_loss, theta0);
  std::vector<Tensor> out;
  out.reserve(g.grads.size());
  for (const Var& v : g.grads) out.push_back(v.value());
  return out;
}

void Adam::step(std::vector<Tensor*> params, const std::vector<Tensor>& grads, const std::vector<bool>& active, double lr) {
  if (params.size() != grads.size() || params.size() != active.size()) {
    fail(ErrorKind::kInvalidArgument, "Adam: parameter/gradient count mismatch");
  }
  if (m.empty()) {
    for (const Tensor* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
  ++step_count;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active[i]) continue;
    Tensor& p = *params[i];
    if (m[i].shape() != p.shape()) {
      m[i] = Tensor(p.shape());
      v[i] = Tensor(p.shape());
    }
    const Tensor& g = grads[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1 - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
    }
  }
}

namespace {

Var sample_loss(const TsarModel& model, std::span<const Var> theta, const ImageDataset& ds, Sample s, bool* correct) {
  Tape& tape = *theta[0].tape();
  Var logits = model.logits(theta, tape.constant(image_of(ds, s)));
  if (correct) {
    const Tensor& z = logits.value();
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < z.numel(); ++j)
      if (z[j] > z[arg]) arg = j;
    *correct = arg == s.cls;
  }
  const int label[1] = {s.cls};
  return ops::softmax_xent(logits, label);
}

}  // namespace

Unrolled inner_loop(const TsarModel& model, std::span<const Var> theta0, const ImageDataset& ds,
                    std::span<const Sample> seq, double lr, bool create_graph) {
  std::vector<bool> mask;
  for (const Parameter& p : model.params()) {
    const bool reg = p.group == ParamGroup::kRegulatorConv || p.group == ParamGroup::kRegulatorOut;
    if (reg && !p.frozen) fail(ErrorKind::kInvalidArgument, "inner loop requires the regulator frozen (" + p.name + ")");
    mask.push_back(!p.frozen);
  }
  return unroll(
      theta0, mask,
      [&](std::span<const Var> theta, int k) {
        return sample_loss(model, theta, ds, seq[static_cast<std::size_t>(k)], nullptr);
      },
      static_cast<int>(seq.size()), lr, create_graph);
}

Var mean_loss(const TsarModel& model, std::span<const Var> theta, const ImageDataset& ds, std::span<const Sample> samples,
              double* accuracy) {
  if (samples.empty()) fail(ErrorKind::kInvalidArgument, "mean_loss: no samples");
  Var total;
  int correct = 0;
  for (const Sample& s : samples) {
    bool ok = false;
    Var l = sample_loss(model, theta, ds, s, &ok);
    correct += ok;
    total = total.valid() ? ops::add(total, l) : l;
  }
  if (accuracy) *accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return ops::affine(total, 1.0 / static_cast<double>(samples.size()), 0.0);
}

OuterResult meta_step(MetaState& state, const ImageDataset& ds, const MetaBatch& batch, const MetaConfig& config) {
  TsarModel& model = state.model;
  OuterResult r;
  Tape tape;
  const std::vector<Var> theta0 = model.bind(tape, true);
  model.set_phase(Phase::kMetaInner);
  const Unrolled inner =
      inner_loop(model, theta0, ds, batch.inner, config.inner_lr, config.order == MetaOrder::kSecond);
  model.set_phase(Phase::kMetaOuter);
  if (!inner.finite) {
    r.aborted = true;
    return r;
  }
  Var loss = mean_loss(model, inner.theta, ds, batch.retention, &r.retention_acc);
  r.retention_loss = loss.value().item();
  if (!std::isfinite(r.retention_loss)) {
    r.aborted = true;
    return r;
  }
  const std::vector<Tensor> grads = meta_gradient(theta0, inner, loss, config.order);
  for (const Tensor& g : grads) {
    if (!g.all_finite()) {
      r.aborted = true;
      return r;
    }
  }
  std::vector<Tensor*> params;
  std::vector<bool> active;
  for (Parameter& p : model.params()) {
    params.push_back(&p.value);
    active.push_back(!p.frozen);
  }
  state.adam.step(params, grads, active, config.outer_lr);
  return r;
}

std::vector<Sample> draw_probe(const ImageDataset& ds, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x70726f6265ULL);
  std::vector<Sample> all;
  for (std::size_t c = 0; c < ds.num_classes(); ++c)
    for (std::size_t i = 0; i < ds.images[c].size(); ++i) all.push_back({static_cast<int>(c), static_cast<int>(i)});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(all.size(), static_cast<std::size_t>(std::max(n, 0))));
  return all;
}

std::pair<std::array<double, 5>, double> probe_gate_stats(const TsarModel& model, const ImageDataset& ds,
                                                          std::span<const Sample> probe) {
  std::vector<double> all;
  for (const Sample& s : probe) {
    const GateSet g = model.regulate(image_of(ds, s)).second;
    for (const Tensor& t : g.gates) all.insert(all.end(), t.data().begin(), t.data().end());
  }
  std::array<double, 5> pct{};
  if (all.empty()) return {pct, 0.0};
  double mean = 0.0;
  for (double v : all) mean += v;
  mean /= static_cast<double>(all.size());
  std::sort(all.begin(), all.end());
  const double qs[5] = {0.01, 0.25, 0.5, 0.75, 0.99};
  for (int i = 0; i < 5; ++i) {
    const double pos = qs[i] * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, all.size() - 1);
    pct[static_cast<std::size_t>(i)] = all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
  }
  return {pct, mean};
}

TsarModel meta_train(TsarModel model, const ImageDataset& ds, const MetaConfig& config,
                     const std::function<void(const MetaLogRecord&)>& on_iteration) {
  validate_meta_dataset(ds);
  if (model.num_classes() != static_cast<std::int64_t>(ds.num_classes())) {
    fail(ErrorKind::kConfig, "model predicts " + std::to_string(model.num_classes()) + " classes, dataset has " +
                                 std::to_string(ds.num_classes()));
  }
  if (model.variant() == Variant::kScratch) fail(ErrorKind::kConfig, "scratch models are not meta-trained");
  MetaState state{std::move(model), Adam{}, 0, std::mt19937_64(config.seed)};
  const std::vector<Sample> probe = draw_probe(ds, config.probe_size, config.seed);
  for (int it = 0; it < config.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    MetaLogRecord rec;
    rec.iter = it;
    if (state.model.has_regulator()) std::tie(rec.gate_percentiles, rec.mean_gate) = probe_gate_stats(state.model, ds, probe);
    const MetaBatch batch = sample_meta_batch(ds, state.rng, config.batch);
    const OuterResult r = meta_step(state, ds, batch, config);
    rec.retention_acc = r.retention_acc;
    rec.retention_loss = r.retention_loss;
    rec.aborted = r.aborted;
    state.iteration = it + 1;
    rec.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_iteration) on_iteration(rec);
  }
  return std::move(state.model);
}

}  // namespace tsar
