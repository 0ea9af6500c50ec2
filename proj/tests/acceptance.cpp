// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tsar/analysis.hpp"
#include "tsar/error.hpp"
#include "tsar/meta.hpp"
#include "tsar/ops.hpp"
#include "tsar/persist.hpp"
#include "tsar/selfcheck.hpp"
#include "tsar/stats.hpp"
#include "tsar/transfer.hpp"

using namespace tsar;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& s) {
  std::fprintf(stderr, "  .. %s\n", s.c_str());
  std::fflush(stderr);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_image(std::mt19937_64& rng, std::int64_t c = 3, std::int64_t h = 28, std::int64_t w = 28) {
  Tensor t(Shape{1, c, h, w});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : t.data()) v = u(rng);
  return t;
}

GateSet constant_gates(const TsarModel& m, double v) {
  GateSet g;
  for (const Shape& s : m.gate_shapes()) g.gates.emplace_back(s, v);
  return g;
}

double xent(const Tensor& logits, int label) {
  double m = logits[0];
  for (std::int64_t j = 1; j < logits.numel(); ++j) m = std::max(m, logits[j]);
  double s = 0.0;
  for (std::int64_t j = 0; j < logits.numel(); ++j) s += std::exp(logits[j] - m);
  return -(logits[label] - m - std::log(s));
}

// ---------------------------------------------------------------------------

Outcome gradients(const SelfCheckReport& r) {
  double worst = 0.0;
  int failed = 0, rows = 0;
  for (const CheckRow& row : r.rows) {
    if (row.name.starts_with("meta_gradient")) continue;
    ++rows;
    worst = std::max(worst, row.worst);
    failed += row.passed && row.instances >= 50 && row.threshold <= 1e-4 ? 0 : 1;
  }
  const bool ok = failed == 0 && rows > 0 && r.seconds < 60.0;
  return {ok, fmt("%d primitives x 50 instances, worst rel err %.2e (<= 1e-4), %.1f s", rows, worst, r.seconds)};
}

Outcome meta_gradients(const SelfCheckReport& r) {
  std::string d;
  bool ok = true;
  int seen = 0;
  for (const CheckRow& row : r.rows) {
    if (!row.name.starts_with("meta_gradient")) continue;
    ++seen;
    ok = ok && row.passed;
    d += fmt("%s%s %.2e (tol %.0e)", d.empty() ? "" : ", ", row.name.c_str(), row.worst, row.threshold);
  }
  return {ok && seen == 2, d};
}

Outcome gating_identities() {
  std::mt19937_64 rng(7);
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kTsar, 5), 1);
  m.init_regulation_bias(BiasMode::sculpt());
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor& cp_b = m.params()[static_cast<std::size_t>(m.index_of("clf.cp.b"))].value;
  for (double& v : cp_b.data()) v = n(rng);
  for (int s = 1; s <= 3; ++s) {
    Tensor& b = m.params()[static_cast<std::size_t>(m.index_of("clf.conv" + std::to_string(s) + ".b"))].value;
    for (double& v : b.data()) v = n(rng);
  }
  int identity = 0, bias_only = 0;
  const int trials = 8;
  for (int t = 0; t < trials; ++t) {
    const Tensor x = random_image(rng);
    identity += m.gated_forward(x, constant_gates(m, 1.0)) == m.ungated_forward(x);
    const Tensor zero = m.gated_forward(x, constant_gates(m, 0.0));
    bool same = zero.numel() == cp_b.numel();
    for (std::int64_t j = 0; same && j < zero.numel(); ++j) same = zero[j] == cp_b[j];
    bias_only += same;
  }

  // dL/dW against eta times finite differences of L in the functional weight.
  const Tensor x = random_image(rng);
  const int label = 2;
  const GateSet gates = m.regulate(x).second;
  Tape tape;
  const std::vector<Var> bound = m.bind(tape, true);
  const int labels[1] = {label};
  Var loss = ops::softmax_xent(m.logits(bound, tape.constant(x)), labels);
  const auto names = m.governed_weight_names();
  std::vector<Var> targets;
  for (const std::string& nm : names) targets.push_back(bound[static_cast<std::size_t>(m.index_of(nm))]);
  const GradResult g = grad(loss, targets);
  TsarModel functional = m;
  for (std::size_t l = 0; l < names.size(); ++l) {
    Tensor& w = functional.params()[static_cast<std::size_t>(functional.index_of(names[l]))].value;
    for (std::int64_t j = 0; j < w.numel(); ++j) w[j] *= gates.gates[l][j];
  }
  const GateSet ones = constant_gates(m, 1.0);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t l = 0; l < names.size(); ++l) {
    const auto pi = static_cast<std::size_t>(functional.index_of(names[l]));
    std::uniform_int_distribution<std::int64_t> pick(0, functional.params()[pi].value.numel() - 1);
    for (int t = 0; t < 16; ++t) {
      const std::int64_t j = pick(rng);
      double& w = functional.params()[pi].value[j];
      const double w0 = w;
      w = w0 + h;
      const double up = xent(functional.gated_forward(x, ones), label);
      w = w0 - h;
      const double down = xent(functional.gated_forward(x, ones), label);
      w = w0;
      const double want = gates.gates[l][j] * (up - down) / (2 * h);
      worst = std::max(worst, std::abs(g.grads[l].value()[j] - want) / std::max(1.0, std::abs(want)));
    }
  }
  const bool ok = identity == trials && bias_only == trials && worst <= 1e-6;
  return {ok, fmt("ones bit-exact %d/%d, zeros bias-only %d/%d, eta scaling err %.2e (<= 1e-6)", identity, trials,
                  bias_only, trials, worst)};
}

Outcome initialization() {
  std::string d;
  bool ok = true;
  for (const char* preset : {"tiny"}) {
    std::mt19937_64 rng(11);
    TsarModel grow = TsarModel::build(preset_config(preset, Variant::kTsar, 25), 2);
    grow.init_regulation_bias(BiasMode::grow());
    TsarModel sculpt = TsarModel::build(preset_config(preset, Variant::kTsar, 25), 2);
    sculpt.init_regulation_bias(BiasMode::sculpt());
    double gs = 0.0, ss = 0.0, n = 0.0, lo = 1.0, hi = 0.0;
    const std::int64_t side = preset_config(preset, Variant::kTsar, 25).classifier.in.height;
    for (int i = 0; i < 64; ++i) {
      const Tensor x = random_image(rng, 3, side, side);
      const GateSet a = grow.regulate(x).second;
      const GateSet b = sculpt.regulate(x).second;
      for (std::size_t l = 0; l < a.gates.size(); ++l) {
        for (std::int64_t j = 0; j < a.gates[l].numel(); ++j) {
          gs += a.gates[l][j];
          ss += b.gates[l][j];
          lo = std::min({lo, a.gates[l][j], b.gates[l][j]});
          hi = std::max({hi, a.gates[l][j], b.gates[l][j]});
          n += 1.0;
        }
      }
    }
    const double gm = gs / n, sm = ss / n;
    ok = ok && gm < 1e-2 && sm >= 0.4 && sm <= 0.6 && lo > 0.0 && hi < 1.0;
    d += fmt("%s%s: grow %.2e, sculpt %.3f, range [%.2e, %.6f]", d.empty() ? "" : "; ", preset, gm, sm, lo, hi);
  }
  return {ok, d};
}

Outcome composition() {
  GlyphSpec gs;
  gs.num_classes = 25;
  gs.per_class = 20;
  const ImageDataset ds = synthetic_glyphs(gs, 1);
  std::mt19937_64 rng(21);
  int bad = 0;
  for (int n = 0; n < 1000; ++n) {
    const MetaBatch b = sample_meta_batch(ds, rng);
    int same = 0, other = 0;
    for (const Sample& s : b.retention) (s.cls == b.inner_class ? same : other) += 1;
    bool inner_ok = b.inner.size() == 20;
    for (const Sample& s : b.inner) inner_ok = inner_ok && s.cls == b.inner_class;
    bad += inner_ok && same == 20 && other == 64 ? 0 : 1;
  }
  GlyphSpec ts;
  ts.num_classes = 20;
  ts.per_class = 40;
  const ImageDataset tds = synthetic_glyphs(ts, 1001);
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kTsar, 25), 3);
  m.init_regulation_bias(BiasMode::grow());
  TransferConfig c;
  c.seed = 4;
  const TransferResult r = transfer_from(m, BiasMode::grow(), tds, c, 5);
  const bool ok = bad == 0 && r.steps == c.num_tasks * c.images_per_task;
  return {ok, fmt("%d/1000 batches off 20 + (20 + 64); transfer steps %d (want %d)", bad, r.steps,
                  c.num_tasks * c.images_per_task)};
}

RegulationTrace random_full(std::int64_t synapses, int tasks, int per_task, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RegulationTrace t;
  t.detail = TraceDetail::kFull;
  t.layers = {TraceLayer{"C1", Shape{synapses}, {}}};
  int step = 0;
  for (int c = 0; c < tasks; ++c) {
    for (int i = 0; i < per_task; ++i) {
      TraceStep s{step++, c, c, i, {}, {}, {}};
      std::vector<double> g(static_cast<std::size_t>(synapses));
      for (double& x : g) x = u(rng);
      s.summary.push_back(summarize(g));
      s.gates.push_back(std::move(g));
      t.steps.push_back(std::move(s));
    }
  }
  return t;
}

Outcome activity_oracle() {
  double worst = 0.0;
  bool mass = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const RegulationTrace t = random_full(200, 5, 10, seed);
    const analysis::LayerSeries series = analysis::layer_series(t, 0);
    const analysis::ActivityTable a = analysis::activity_table(series);
    for (std::size_t j = 0; j < 200; ++j) {
      double sums[5] = {0, 0, 0, 0, 0};
      int counts[5] = {0, 0, 0, 0, 0};
      for (const TraceStep& s : t.steps) {
        sums[s.task] += s.gates[0][j];
        ++counts[s.task];
      }
      for (std::size_t c = 0; c < 5; ++c) {
        const double spec = sums[c] / counts[c];
        double agn = 0.0;
        for (std::size_t o = 0; o < 5; ++o)
          if (o != c) agn += sums[o] / counts[o];
        agn /= 4.0;
        worst = std::max(worst, std::abs(a.specific[a.index(j, c)] - spec));
        worst = std::max(worst, std::abs(a.agnostic[a.index(j, c)] - agn));
      }
    }
    mass = mass && analysis::modularity_histogram(a).total() == 200u * 5u;
    const std::size_t band = analysis::centile_band(std::vector<double>(200, 0.0), 0.75, 0.99).size();
    mass = mass && analysis::timelag_histogram(series).total() == band * (t.steps.size() - 1);
    mass = mass && analysis::timelag_histogram(series, 0.0, 1.0).total() == 200u * (t.steps.size() - 1);
  }
  return {worst <= 1e-12 && mass, fmt("max |activity - recount| %.1e (<= 1e-12), pair mass %s", worst,
                                      mass ? "conserved" : "NOT conserved")};
}

Outcome synthetic_discrimination() {
  analysis::SyntheticSpec spec;
  spec.num_synapses = 1000;
  spec.num_tasks = 10;
  spec.per_task = 5;
  const RegulationTrace t = analysis::synthetic_trace(spec, 8);
  const analysis::ActivityTable a = analysis::activity_table(analysis::layer_series(t, 0));
  const analysis::Histogram2D h = analysis::modularity_histogram(a);
  int in_module = 0, separated = 0;
  for (std::size_t j = 0; j < a.synapses.size(); ++j) {
    const auto c = static_cast<std::size_t>(analysis::module_of(spec, static_cast<std::int64_t>(j)));
    ++in_module;
    separated += analysis::bin_of(a.specific_rank[a.index(j, c)], h.row_lo, h.row_hi, h.rows) <
                 analysis::bin_of(a.agnostic_rank[a.index(j, c)], h.col_lo, h.col_hi, h.cols);
  }
  analysis::SyntheticSpec rs = spec;
  rs.kind = analysis::SyntheticKind::kRandom;
  rs.num_synapses = 2000;
  rs.per_task = 10;
  const analysis::ActivityTable r = analysis::activity_table(analysis::layer_series(analysis::synthetic_trace(rs, 4), 0));
  const double rho = stats::spearman(r.specific_rank, r.agnostic_rank);
  const bool ok = separated == in_module && std::abs(rho) < 0.1;
  return {ok, fmt("modular: %d/%d in-module pairs in a strictly better bin; random: |rho| %.4f (< 0.1)", separated,
                  in_module, std::abs(rho))};
}

Outcome powerlaw_and_bursts() {
  std::string d;
  bool ok = true;
  for (double alpha : {1.5, 2.0, 3.0}) {
    const int support = static_cast<int>(std::pow(10.0, 6.0 / alpha));
    std::vector<double> weights(static_cast<std::size_t>(support));
    for (int s = 1; s <= support; ++s) weights[static_cast<std::size_t>(s - 1)] = std::pow(s, -alpha);
    std::discrete_distribution<int> draw(weights.begin(), weights.end());
    std::mt19937_64 rng(static_cast<std::uint64_t>(alpha * 100));
    std::map<int, std::uint64_t> counts;
    for (int i = 0; i < 1000000; ++i) ++counts[draw(rng) + 1];
    const analysis::PowerLawFit f = analysis::powerlaw_fit(analysis::log_binned(counts));
    ok = ok && std::abs(f.slope + alpha) <= 0.1;
    d += fmt("%salpha %.1f -> %.3f", d.empty() ? "" : ", ", alpha, -f.slope);
  }
  int mismatches = 0;
  const analysis::LayerSeries s = analysis::layer_series(random_full(300, 3, 20, 2), 0);
  for (const analysis::SpikeCounts& sc : analysis::spike_size_distribution(s)) {
    std::map<int, std::uint64_t> freq;
    for (std::size_t k = 0; k < s.steps(); ++k) {
      int n = 0;
      for (std::size_t j = 0; j < s.synapses(); ++j) n += s.value(k, j) > sc.threshold ? 1 : 0;
      mismatches += sc.per_step[k] == n ? 0 : 1;
      ++freq[n];
    }
    mismatches += sc.freq == freq ? 0 : 1;
  }
  return {ok && mismatches == 0, d + fmt(" (+-0.1); burst count mismatches %d", mismatches)};
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

Outcome persistence() {
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kTsar, 5), 11);
  m.init_regulation_bias(BiasMode::custom_bias(-3.25));
  const nlohmann::json run{{"lr", 0.001}};
  const fs::path path = fs::temp_directory_path() / "tsar_acceptance.ck";
  save_checkpoint(path.string(), m, run);
  const TsarModel back = model_from_checkpoint(load_checkpoint(path.string()));
  bool exact = back.params().size() == m.params().size();
  for (const Parameter& p : m.params()) exact = exact && back.param(p.name) == p.value;
  const std::vector<std::uint8_t> bytes = read_file_bytes(path.string());
  exact = exact && encode_checkpoint(back, run) == bytes;
  fs::remove(path);

  bool traces = true;
  GlyphSpec gs;
  gs.num_classes = 4;
  gs.per_class = 14;
  const ImageDataset ds = synthetic_glyphs(gs, 3);
  for (TraceDetail detail : {TraceDetail::kSummary, TraceDetail::kTracked, TraceDetail::kFull}) {
    TransferConfig c;
    c.num_tasks = 4;
    c.images_per_task = 3;
    c.validation_per_class = 2;
    c.detail = detail;
    const TransferResult r = transfer_from(m, BiasMode::sculpt(), ds, c, 1);
    const fs::path tp = fs::temp_directory_path() / "tsar_acceptance_trace.jsonl";
    write_trace(tp.string(), r.trace);
    traces = traces && read_trace(tp.string()) == r.trace;
    fs::remove(tp);
  }

  std::vector<std::string> causes;
  std::vector<std::uint8_t> b = bytes;
  b[b.size() / 2] ^= 0x10;
  causes.push_back(error_of([&] { decode_checkpoint(b); }));
  b = bytes;
  b.resize(b.size() / 3);
  causes.push_back(error_of([&] { decode_checkpoint(b); }));
  b = bytes;
  b[1] = 'Z';
  causes.push_back(error_of([&] { decode_checkpoint(b); }));
  causes.push_back(error_of([&] { decode_trace("{\"type\":\"header\"\n"); }));
  const std::vector<std::string> want = {"checksum:", "checksum:", "magic:", "trace line 1:"};
  int named = 0;
  for (std::size_t i = 0; i < want.size(); ++i) named += causes[i].starts_with(want[i]) ? 1 : 0;
  const bool ok = exact && traces && named == static_cast<int>(want.size());
  return {ok, fmt("checkpoint %s, traces %s, corrupted inputs named %d/%zu", exact ? "bit-exact" : "DIFFERS",
                  traces ? "value-exact" : "DIFFER", named, want.size())};
}

Outcome statistics() {
  const std::vector<double> x = {1, 2, 3}, y = {4, 5, 6};
  const stats::MannWhitney mw = stats::mann_whitney(x, y);
  double brute = 0.0;
  for (double a : x)
    for (double b : y) brute += a > b ? 1.0 : a == b ? 0.5 : 0.0;
  const std::vector<double> constant(25, 0.625);
  const stats::Interval ci = stats::bootstrap_ci(constant);
  std::vector<double> lx, ly;
  for (int i = 0; i < 50; ++i) {
    lx.push_back(0.1 * i - 2.0);
    ly.push_back(3.0 * lx.back() + 0.5);
  }
  const double r = stats::pearson(lx, ly);
  const bool ok = mw.u == 0.0 && brute == 0.0 && ci.lo == 0.625 && ci.hi == 0.625 && ci.estimate == 0.625 &&
                  std::abs(r - 1.0) <= 1e-12;
  return {ok, fmt("U %.1f (enumeration %.1f), constant CI [%.4f, %.4f], pearson - 1 = %.1e", mw.u, brute, ci.lo, ci.hi,
                  r - 1.0)};
}

// ---------------------------------------------------------------------------
// Desk-scale reproductions

struct DeskConfig {
  int iterations = 1000;
  int seeds = 10;
  std::string cache;
};

struct MetaRun {
  TsarModel model;
  std::vector<double> gate_mean;
};

MetaRun meta_run(const DeskConfig& cfg, const ImageDataset& ds, const BiasMode& mode) {
  const std::string tag = fmt("%s_%d", mode.str().c_str(), cfg.iterations);
  fs::path ck;
  if (!cfg.cache.empty()) {
    fs::create_directories(cfg.cache);
    ck = fs::path(cfg.cache) / (tag + ".ck");
    if (fs::exists(ck)) {
      const Checkpoint c = load_checkpoint(ck.string());
      if (c.run_config.value("version", "") == TSAR_VERSION_STRING) {
        note("reusing " + ck.string());
        MetaRun r{model_from_checkpoint(c), c.run_config["gate_mean"].get<std::vector<double>>()};
        return r;
      }
    }
  }
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kTsar, static_cast<std::int64_t>(ds.num_classes())), 7);
  m.init_regulation_bias(mode);
  MetaConfig mc;
  mc.iterations = cfg.iterations;
  mc.seed = 3;
  std::vector<double> gates;
  const auto t0 = std::chrono::steady_clock::now();
  TsarModel trained = meta_train(m, ds, mc, [&](const MetaLogRecord& rec) {
    gates.push_back(rec.mean_gate);
    if (rec.iter % 100 == 0 || rec.iter + 1 == mc.iterations) {
      note(fmt("%s meta iter %d retention %.3f gate %.3e (%.0f s)", mode.str().c_str(), rec.iter, rec.retention_acc,
               rec.mean_gate, seconds_since(t0)));
    }
  });
  if (!ck.empty()) {
    save_checkpoint(ck.string(), trained, nlohmann::json{{"version", TSAR_VERSION_STRING}, {"gate_mean", gates}});
  }
  return {std::move(trained), std::move(gates)};
}

ImageDataset transfer_glyphs(int per_class) {
  GlyphSpec ts;
  ts.num_classes = 20;
  ts.per_class = per_class;
  return synthetic_glyphs(ts, 1001);
}

// One lr for every model: the best Grow setting on tuning seeds disjoint from
// the evaluation seeds.
double tune_lr(const TsarModel& grow, const ImageDataset& tds, std::string& table) {
  double best = 0.0, best_lr = 0.0;
  for (double lr : {1e-3, 3e-3, 1e-2, 3e-2, 1e-1}) {
    std::vector<double> r;
    for (std::uint64_t seed : {100, 101, 102}) {
      TransferConfig c;
      c.lr = lr;
      c.seed = seed;
      const TransferResult t = transfer_from(grow, BiasMode::grow(), tds, c, seed + 1);
      r.push_back(t.diverged ? 0.0 : t.final_retention);
    }
    const double m = stats::mean(r);
    table += fmt("%s%g:%.3f", table.empty() ? "" : " ", lr, m);
    if (m > best) {
      best = m;
      best_lr = lr;
    }
  }
  note("lr grid (grow, tuning seeds 100-102): " + table);
  return best_lr;
}

struct Desk {
  double lr = 0.0;
  std::string grid;
  std::vector<double> grow, sculpt, scratch;
  std::vector<double> enhancing_curve, diminishing_curve;
  std::vector<double> enhancing_final, diminishing_final, mixed_final;
  std::vector<double> grow_gates;
};

Desk desk_runs(const DeskConfig& cfg, bool want_treatments) {
  GlyphSpec gs;
  gs.num_classes = 25;
  gs.per_class = 20;
  const ImageDataset meta_ds = synthetic_glyphs(gs, 1);
  const ImageDataset tds = transfer_glyphs(40);
  // Top and bottom 10 of a 200-image pool per task: a 5% selection.
  const ImageDataset treat_ds = transfer_glyphs(210);
  Desk d;
  const MetaRun grow = meta_run(cfg, meta_ds, BiasMode::grow());
  d.grow_gates = grow.gate_mean;
  const MetaRun sculpt = meta_run(cfg, meta_ds, BiasMode::sculpt());
  d.lr = tune_lr(grow.model, tds, d.grid);
  for (int s = 0; s < cfg.seeds; ++s) {
    TransferConfig c;
    c.lr = d.lr;
    c.seed = static_cast<std::uint64_t>(s);
    const std::uint64_t reset = c.seed + 1;
    d.grow.push_back(transfer_from(grow.model, BiasMode::grow(), tds, c, reset).final_retention);
    d.sculpt.push_back(transfer_from(sculpt.model, BiasMode::sculpt(), tds, c, reset).final_retention);
    const TsarModel scratch = TsarModel::build(preset_config("tiny", Variant::kScratch, 20), 100 + c.seed);
    d.scratch.push_back(transfer_from(scratch, BiasMode::grow(), tds, c, reset).final_retention);
    std::string line = fmt("seed %d: grow %.3f sculpt %.3f scratch %.3f", s, d.grow.back(), d.sculpt.back(),
                           d.scratch.back());
    if (want_treatments) {
      for (Treatment t : {Treatment::kEnhancing, Treatment::kDiminishing, Treatment::kMixed}) {
        TransferConfig tc = c;
        tc.treatment = t;
        const TransferResult r = transfer_from(grow.model, BiasMode::grow(), treat_ds, tc, reset);
        if (t == Treatment::kEnhancing) {
          d.enhancing_curve.push_back(stats::mean(r.past_task_curve));
          d.enhancing_final.push_back(r.final_retention);
        } else if (t == Treatment::kDiminishing) {
          d.diminishing_curve.push_back(stats::mean(r.past_task_curve));
          d.diminishing_final.push_back(r.final_retention);
        } else {
          d.mixed_final.push_back(r.final_retention);
        }
      }
      line += fmt(" | enh %.3f/%.3f dim %.3f/%.3f mixed %.3f", d.enhancing_curve.back(), d.enhancing_final.back(),
                  d.diminishing_curve.back(), d.diminishing_final.back(), d.mixed_final.back());
    }
    note(line);
  }
  return d;
}

Outcome continual_effect(const Desk& d) {
  const stats::SignTest gs = stats::sign_test(d.grow, d.sculpt);
  const stats::SignTest gx = stats::sign_test(d.grow, d.scratch);
  const double scratch = stats::mean(d.scratch);
  const bool ok = gs.p_greater < 0.05 && gx.p_greater < 0.05 && std::abs(scratch - 0.05) <= 0.03;
  return {ok, fmt("lr %g; grow %.3f, sculpt %.3f (%d/%d wins, p %.4f), scratch %.3f (%d/%d wins, p %.4f; "
                  "|scratch - 0.05| %.3f <= 0.03)",
                  d.lr, stats::mean(d.grow), stats::mean(d.sculpt), gs.wins, gs.wins + gs.losses, gs.p_greater, scratch,
                  gx.wins, gx.wins + gx.losses, gx.p_greater, std::abs(scratch - 0.05))};
}

Outcome treatment_effect(const Desk& d) {
  // A higher mean past-task curve means slower degradation.
  const stats::SignTest st = stats::sign_test(d.diminishing_curve, d.enhancing_curve);
  int mixed_best = 0;
  for (std::size_t i = 0; i < d.mixed_final.size(); ++i) {
    mixed_best += d.mixed_final[i] >= std::max(d.enhancing_final[i], d.diminishing_final[i]) ? 1 : 0;
  }
  const int n = static_cast<int>(d.mixed_final.size());
  const bool ok = n >= 10 && st.p_greater < 0.05 && 2 * mixed_best > n;
  return {ok, fmt("past-task mean enh %.3f < dim %.3f in %d/%d seeds (p %.4f); mixed >= max(enh, dim) in %d/%d "
                  "seeds (final enh %.3f dim %.3f mixed %.3f)",
                  stats::mean(d.enhancing_curve), stats::mean(d.diminishing_curve), st.wins, st.wins + st.losses,
                  st.p_greater, mixed_best, n, stats::mean(d.enhancing_final), stats::mean(d.diminishing_final),
                  stats::mean(d.mixed_final))};
}

Outcome grow_dynamics(const Desk& d, int iterations) {
  const double floor = 1.0 / (1.0 + std::exp(8.0));
  const std::size_t quarter = static_cast<std::size_t>(iterations / 4);
  if (d.grow_gates.size() < quarter || quarter == 0) return {false, "no meta log"};
  const double start = d.grow_gates[0];
  double peak = 0.0;
  std::size_t at = 0;
  for (std::size_t i = 0; i < quarter; ++i) {
    if (d.grow_gates[i] > peak) {
      peak = d.grow_gates[i];
      at = i;
    }
  }
  const bool ok = peak >= 10.0 * start;
  return {ok, fmt("probe mean gate %.2e at start (sigmoid(-8) = %.2e), %.2e by iteration %zu of %zu (%.1fx, >= 10x)",
                  start, floor, peak, at, quarter, peak / start)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  DeskConfig desk;
  std::vector<int> only;
  app.add_option("--iterations", desk.iterations, "meta-iterations for the desk-scale runs")->check(CLI::Range(4, 1 << 20));
  app.add_option("--seeds", desk.seeds, "transfer seeds for the desk-scale runs")->check(CLI::Range(1, 1000));
  app.add_option("--cache", desk.cache, "reuse meta-trained checkpoints from this directory");
  app.add_option("--only", only, "run these criteria only")->delimiter(',')->check(CLI::Range(1, 13));
  CLI11_PARSE(app, argc, argv);

  const std::set<int> chosen(only.begin(), only.end());
  auto wanted = [&](int k) { return chosen.empty() || chosen.contains(k); };
  const char* names[] = {"",
                         "gradient correctness",
                         "meta-gradient correctness",
                         "gating identities",
                         "initialization regimes",
                         "protocol composition",
                         "activity oracle equivalence",
                         "synthetic-trace discrimination",
                         "power-law fitter and burst counts",
                         "desk-scale continual-learning effect",
                         "enhancing/diminishing effect",
                         "grow meta-dynamics",
                         "persistence",
                         "statistics suite"};
  int failures = 0;
  auto report = [&](int k, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %2d %s  %s: %s\n", k, o.pass ? "PASS" : "FAIL", names[k], o.detail.c_str());
    std::fflush(stdout);
  };

  std::optional<SelfCheckReport> checks;
  auto self_checks = [&]() -> const SelfCheckReport& {
    if (!checks) checks = run_self_checks(50, 1, CheckPrecision::kF64);
    return *checks;
  };
  report(1, [&] { return gradients(self_checks()); });
  report(2, [&] { return meta_gradients(self_checks()); });
  report(3, gating_identities);
  report(4, initialization);
  report(5, composition);
  report(6, activity_oracle);
  report(7, synthetic_discrimination);
  report(8, powerlaw_and_bursts);
  report(12, persistence);
  report(13, statistics);

  if (wanted(9) || wanted(10) || wanted(11)) {
    std::optional<Desk> d;
    std::string error;
    try {
      d = desk_runs(desk, wanted(10));
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto desk_report = [&](int k, const std::function<Outcome(const Desk&)>& f) {
      report(k, [&] { return d ? f(*d) : Outcome{false, "error: " + error}; });
    };
    desk_report(9, continual_effect);
    desk_report(10, treatment_effect);
    desk_report(11, [&](const Desk& x) { return grow_dynamics(x, desk.iterations); });
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
