#include "tsar/tsar_c.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <new>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tsar/analysis.hpp"
#include "tsar/error.hpp"
#include "tsar/meta.hpp"
#include "tsar/persist.hpp"
#include "tsar/selfcheck.hpp"
#include "tsar/stats.hpp"
#include "tsar/transfer.hpp"

#ifndef TSAR_VERSION
#define TSAR_VERSION "0.0.0"
#endif

using nlohmann::json;
using namespace tsar;

struct tsar_dataset {
  ImageDataset ds;
  std::vector<std::string> excluded;
  json source;
};

struct tsar_model {
  TsarModel model;
  RunMode mode;
  json run_config;
};

struct tsar_trace {
  RegulationTrace trace;
};

namespace {

thread_local std::string g_error;

tsar_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::kShape: return TSAR_ERR_SHAPE;
    case ErrorKind::kNumeric: return TSAR_ERR_NUMERIC;
    case ErrorKind::kConfig: return TSAR_ERR_CONFIG;
    case ErrorKind::kIo: return TSAR_ERR_IO;
    case ErrorKind::kFormat: return TSAR_ERR_FORMAT;
    case ErrorKind::kInvalidArgument: return TSAR_ERR_INVALID_ARGUMENT;
  }
  return TSAR_ERR_INTERNAL;
}

struct DetailError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class F>
tsar_status guarded(F&& f) {
  try {
    f();
    g_error.clear();
    return TSAR_OK;
  } catch (const Error& e) {
    g_error = e.what();
    return status_of(e.kind());
  } catch (const DetailError& e) {
    g_error = e.what();
    return TSAR_ERR_INSUFFICIENT_DETAIL;
  } catch (const json::exception& e) {
    g_error = std::string("config: ") + e.what();
    return TSAR_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return TSAR_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return TSAR_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) fail(ErrorKind::kInvalidArgument, std::string(what) + " is NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void give(char** out, const json& j) {
  need(out, "output pointer");
  *out = dup(j.dump(2));
}

// Strict reader over a JSON object: unknown keys and wrong types are config
// errors naming the field path.
class Fields {
 public:
  Fields(const char* text, std::string scope) : scope_(std::move(scope)) {
    if (text != nullptr && *text != '\0') {
      try {
        j_ = json::parse(text);
      } catch (const json::parse_error& e) {
        fail(ErrorKind::kConfig, scope_ + ": invalid JSON: " + e.what());
      }
    }
    if (j_.is_null()) j_ = json::object();
    if (!j_.is_object()) fail(ErrorKind::kConfig, scope_ + ": expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      fail(ErrorKind::kConfig, scope_ + "." + key + ": wrong type (" + it->dump() + ")");
    }
  }

  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) fail(ErrorKind::kConfig, scope_ + "." + k + ": unknown key");
    }
  }

 private:
  json j_;
  std::string scope_;
  std::set<std::string> seen_;
};

void read_in_shape(Fields& f, InShape& in) {
  int c = static_cast<int>(in.channels), h = static_cast<int>(in.height), w = static_cast<int>(in.width);
  f.get("channels", c);
  f.get("height", h);
  f.get("width", w);
  if (c < 1 || h < 1 || w < 1) fail(ErrorKind::kConfig, "image shape must be positive");
  in.channels = c;
  in.height = h;
  in.width = w;
}

TransferConfig parse_transfer_config(const char* text, json* annotate = nullptr) {
  Fields f(text, "transfer");
  TransferConfig c;
  json note;
  f.get("annotate", note);
  if (annotate != nullptr) *annotate = note;
  std::string treatment = treatment_name(c.treatment), detail = trace_detail_name(c.detail);
  f.get("num_tasks", c.num_tasks);
  f.get("images_per_task", c.images_per_task);
  f.get("validation_per_class", c.validation_per_class);
  f.get("lr", c.lr);
  f.get("seed", c.seed);
  f.get("treatment", treatment);
  f.get("detail", detail);
  f.get("tracked_lo", c.tracked_lo);
  f.get("tracked_hi", c.tracked_hi);
  f.get("max_tracked", c.max_tracked);
  f.done();
  c.treatment = parse_treatment(treatment);
  c.detail = parse_trace_detail(detail);
  if (!(c.lr > 0.0)) fail(ErrorKind::kConfig, "transfer.lr: must be positive");
  return c;
}

// Mode recorded in a checkpoint, or the variant's natural mode.
RunMode mode_of(const TsarModel& m, const json& run) {
  if (run.is_object() && run.contains("mode") && run["mode"].is_string()) {
    const RunMode r = RunMode::parse(run["mode"].get<std::string>());
    if (r.variant != m.variant()) {
      fail(ErrorKind::kFormat, std::string("checkpoint mode '") + r.str() + "' does not match its architecture (" +
                                   variant_name(m.variant()) + ")");
    }
    return r;
  }
  switch (m.variant()) {
    case Variant::kAnmlStyle: return RunMode::parse("anml");
    case Variant::kOmlStyle: return RunMode::parse("oml");
    case Variant::kScratch: return RunMode::parse("scratch");
    case Variant::kTsar: break;
  }
  return RunMode{Variant::kTsar, BiasMode::grow()};
}

json summary_json(const LayerSummary& s) {
  return json{{"mean", s.mean}, {"p1", s.pct[0]}, {"p25", s.pct[1]}, {"p50", s.pct[2]}, {"p75", s.pct[3]},
              {"p99", s.pct[4]}};
}

std::string number_label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct AnalysisOptions {
  std::optional<std::string> layer;
  std::vector<double> thresholds{0.25, 0.5, 0.75, 0.9};
  double lo = 0.75, hi = 0.99;
  int bins = 0;
  double top_fraction = 0.1;
  int horizon = 0;
  int bins_per_decade = 5;
};

AnalysisOptions parse_analysis_options(const char* text) {
  Fields f(text, "analysis");
  AnalysisOptions o;
  std::string layer;
  f.get("layer", layer);
  if (!layer.empty()) o.layer = layer;
  f.get("thresholds", o.thresholds);
  f.get("lo", o.lo);
  f.get("hi", o.hi);
  f.get("bins", o.bins);
  f.get("top_fraction", o.top_fraction);
  f.get("horizon", o.horizon);
  f.get("bins_per_decade", o.bins_per_decade);
  f.done();
  return o;
}

std::vector<int> layers_of(const RegulationTrace& t, const AnalysisOptions& o) {
  if (o.layer) {
    const int l = t.layer_index(*o.layer);
    if (l < 0) fail(ErrorKind::kInvalidArgument, "trace has no layer '" + *o.layer + "'");
    return {l};
  }
  std::vector<int> all;
  for (std::size_t l = 0; l < t.layers.size(); ++l) all.push_back(static_cast<int>(l));
  return all;
}

void require_detail(const RegulationTrace& t, TraceDetail need, const std::string& analysis) {
  if (static_cast<int>(t.detail) < static_cast<int>(need)) {
    throw DetailError(analysis + " needs a " + trace_detail_name(need) + " trace, got " + trace_detail_name(t.detail));
  }
}

// Per-step burst counts summed over the selected layers.
std::vector<analysis::SpikeCounts> pooled_spikes(const RegulationTrace& t, const std::vector<int>& layers,
                                                 const std::vector<double>& thresholds) {
  std::vector<analysis::SpikeCounts> out;
  for (int l : layers) {
    const std::vector<analysis::SpikeCounts> s = analysis::spike_size_distribution(analysis::layer_series(t, l), thresholds);
    if (out.empty()) {
      out = s;
      continue;
    }
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t k = 0; k < s[i].per_step.size(); ++k) out[i].per_step[k] += s[i].per_step[k];
  }
  for (auto& s : out) {
    s.freq.clear();
    for (int c : s.per_step) ++s.freq[c];
  }
  return out;
}

json analyze_one(const RegulationTrace& t, const std::string& what, const AnalysisOptions& o, const std::string& prefix,
                 json& files) {
  json summary = json::object();
  const std::vector<int> layers = layers_of(t, o);
  if (what == "modularity") {
    require_detail(t, TraceDetail::kTracked, what);
    for (int l : layers) {
      const analysis::ActivityTable a = analysis::activity_table(analysis::layer_series(t, l));
      const analysis::Histogram2D h = analysis::modularity_histogram(a, o.bins > 0 ? o.bins : 100);
      const std::string& name = t.layers[static_cast<std::size_t>(l)].name;
      files[prefix + "modularity_" + name + ".csv"] = analysis::histogram_csv(h);
      summary[name] = json{{"bins", h.rows},
                           {"mass", h.total()},
                           {"pairs", a.synapses.size() * a.tasks.size()},
                           {"rank_spearman", stats::spearman(a.specific_rank, a.agnostic_rank)},
                           {"warning", h.warning}};
    }
  } else if (what == "timelag") {
    require_detail(t, TraceDetail::kTracked, what);
    for (int l : layers) {
      const analysis::LayerSeries s = analysis::layer_series(t, l);
      const analysis::Histogram2D h = analysis::timelag_histogram(s, o.lo, o.hi, o.bins > 0 ? o.bins : 250);
      std::uint64_t diag = 0;
      for (int r = 0; r < h.rows; ++r) diag += h.at(r, r);
      const std::string& name = t.layers[static_cast<std::size_t>(l)].name;
      files[prefix + "timelag_" + name + ".csv"] = analysis::histogram_csv(h);
      summary[name] = json{{"bins", h.rows},
                           {"mass", h.total()},
                           {"diagonal_fraction", h.total() ? static_cast<double>(diag) / static_cast<double>(h.total()) : 0.0}};
    }
  } else if (what == "spikes" || what == "powerlaw") {
    require_detail(t, TraceDetail::kTracked, what);
    for (const analysis::SpikeCounts& s : pooled_spikes(t, layers, o.thresholds)) {
      const std::string tag = number_label(s.threshold);
      if (what == "spikes") {
        std::vector<double> count, freq;
        for (const auto& [c, n] : s.freq) {
          count.push_back(c);
          freq.push_back(static_cast<double>(n));
        }
        files[prefix + "spikes_t" + tag + ".csv"] = analysis::series_csv({"count", "frequency"}, {count, freq});
        summary[tag] = json{{"steps", s.per_step.size()}, {"distinct_counts", s.freq.size()}};
        continue;
      }
      std::map<int, std::uint64_t> positive;
      for (const auto& [c, n] : s.freq)
        if (c > 0) positive[c] = n;
      const std::vector<analysis::LogBin> bins = analysis::log_binned(positive, o.bins_per_decade);
      std::vector<double> x, d;
      for (const auto& b : bins) {
        x.push_back(b.x);
        d.push_back(b.density);
      }
      files[prefix + "powerlaw_t" + tag + ".csv"] = analysis::series_csv({"x", "density"}, {x, d});
      if (bins.size() < 3) {
        summary[tag] = json{{"bins", bins.size()}, {"regime", nullptr}, {"note", "fewer than 3 non-empty bins"}};
        continue;
      }
      const analysis::PowerLawFit f = analysis::powerlaw_fit(bins);
      summary[tag] = json{{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"bins", f.bins},
                          {"regime", analysis::regime_name(f.regime)}};
    }
  } else if (what == "activity-oracle") {
    require_detail(t, TraceDetail::kTracked, what);
    double worst = 0.0;
    for (int l : layers) {
      const analysis::ActivityTable a = analysis::activity_table(analysis::layer_series(t, l));
      for (std::size_t j = 0; j < a.synapses.size(); ++j) {
        for (std::size_t c = 0; c < a.tasks.size(); ++c) {
          const double spec = analysis::task_specific_activity(t, l, a.synapses[j], a.tasks[c]);
          const double agn = analysis::task_agnostic_activity(t, l, a.synapses[j], a.tasks[c]);
          worst = std::max({worst, std::abs(spec - a.specific[a.index(j, c)]), std::abs(agn - a.agnostic[a.index(j, c)])});
        }
      }
    }
    summary["max_abs_deviation"] = worst;
  } else if (what == "cp-signs") {
    require_detail(t, TraceDetail::kFull, what);
    const analysis::CpSignReport r = analysis::cp_sign_analysis(t, o.top_fraction);
    std::vector<double> step;
    for (std::size_t k = 0; k < r.upstream_spikes.size(); ++k) step.push_back(static_cast<double>(k));
    files[prefix + "cp_signs.csv"] =
        analysis::series_csv({"step", "upstream_spike", "pos_mean", "neg_mean"}, {step, r.upstream_spikes, r.pos_mean, r.neg_mean});
    summary = json{{"corr_pos", r.corr_pos},       {"corr_neg", r.corr_neg},        {"positive", r.positive},
                   {"negative", r.negative},       {"zero", r.zero},                {"pos_gates", summary_json(r.pos_gates)},
                   {"neg_gates", summary_json(r.neg_gates)}};
  } else {
    fail(ErrorKind::kInvalidArgument, "unknown analysis '" + what + "'");
  }
  return summary;
}

}  // namespace

extern "C" {

const char* tsar_version(void) { return TSAR_VERSION; }

const char* tsar_status_name(tsar_status s) {
  switch (s) {
    case TSAR_OK: return "ok";
    case TSAR_ERR_SHAPE: return "shape";
    case TSAR_ERR_NUMERIC: return "numeric";
    case TSAR_ERR_CONFIG: return "config";
    case TSAR_ERR_IO: return "io";
    case TSAR_ERR_FORMAT: return "format";
    case TSAR_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case TSAR_ERR_INSUFFICIENT_DETAIL: return "insufficient_detail";
    case TSAR_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* tsar_last_error(void) { return g_error.c_str(); }

void tsar_string_free(char* s) { std::free(s); }

tsar_status tsar_dataset_synthetic(const char* config_json, uint64_t seed, tsar_dataset** out) {
  return guarded([&] {
    need(out, "out");
    Fields f(config_json, "dataset");
    GlyphSpec spec;
    std::string style = glyph_style_name(spec.style);
    int train = -1, test = -1;
    f.get("classes", spec.num_classes);
    f.get("per_class", spec.per_class);
    f.get("style", style);
    f.get("noise", spec.noise);
    f.get("train_per_class", train);
    f.get("test_per_class", test);
    read_in_shape(f, spec.in);
    f.done();
    spec.style = parse_glyph_style(style);
    ImageDataset ds = synthetic_glyphs(spec, seed);
    if (train >= 0 || test >= 0) {
      const int tr = train >= 0 ? train : spec.per_class - test;
      const int te = test >= 0 ? test : spec.per_class - tr;
      if (tr < 0 || te < 0 || tr + te > spec.per_class) fail(ErrorKind::kConfig, "dataset: split exceeds per_class");
      ds.train_per_class = tr;
      ds.test_per_class = te;
    }
    json source{{"kind", "synthetic"}, {"classes", spec.num_classes}, {"per_class", spec.per_class},
                {"style", glyph_style_name(spec.style)}, {"noise", spec.noise}, {"seed", seed},
                {"in_shape", {spec.in.channels, spec.in.height, spec.in.width}}};
    *out = new tsar_dataset{std::move(ds), {}, std::move(source)};
  });
}

tsar_status tsar_dataset_load_folder(const char* path, const char* config_json, tsar_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    Fields f(config_json, "dataset");
    FolderSpec spec;
    std::string resize = "bilinear";
    int classes = 0;
    f.get("classes", classes);
    f.get("resize", resize);
    f.get("min_per_class", spec.min_per_class);
    f.get("train_per_class", spec.train_per_class);
    f.get("test_per_class", spec.test_per_class);
    read_in_shape(f, spec.in);
    f.done();
    if (resize == "bilinear") {
      spec.resize = ResizeMode::kBilinear;
    } else if (resize == "nearest") {
      spec.resize = ResizeMode::kNearest;
    } else {
      fail(ErrorKind::kConfig, "dataset.resize: expected bilinear or nearest, got '" + resize + "'");
    }
    FolderLoadReport report;
    ImageDataset ds = load_image_folder(path, spec, &report);
    if (classes > 0) {
      if (static_cast<std::size_t>(classes) > ds.num_classes()) {
        fail(ErrorKind::kConfig, "dataset.classes: " + std::to_string(classes) + " requested, folder has " +
                                     std::to_string(ds.num_classes()));
      }
      std::vector<int> keep(static_cast<std::size_t>(classes));
      for (int c = 0; c < classes; ++c) keep[static_cast<std::size_t>(c)] = c;
      ds = ds.subset(keep);
    }
    json source{{"kind", "folder"}, {"path", path}, {"resize", resize}, {"min_per_class", spec.min_per_class},
                {"classes", ds.num_classes()},
                {"in_shape", {spec.in.channels, spec.in.height, spec.in.width}}};
    *out = new tsar_dataset{std::move(ds), report.excluded, std::move(source)};
  });
}

tsar_status tsar_dataset_info(const tsar_dataset* d, int probe_train, char** info_json) {
  return guarded([&] {
    need(d, "dataset");
    std::vector<std::size_t> sizes;
    for (const auto& c : d->ds.images) sizes.push_back(c.size());
    json j{{"source", d->source},
           {"classes", d->ds.num_classes()},
           {"class_names", d->ds.class_names},
           {"class_sizes", sizes},
           {"in_shape", {d->ds.in.channels, d->ds.in.height, d->ds.in.width}},
           {"train_per_class", d->ds.train_per_class},
           {"test_per_class", d->ds.test_per_class},
           {"excluded", d->excluded}};
    if (probe_train > 0) j["linear_probe_accuracy"] = linear_probe_accuracy(d->ds, probe_train);
    give(info_json, j);
  });
}

tsar_status tsar_dataset_write_png(const tsar_dataset* d, const char* dir) {
  return guarded([&] {
    need(d, "dataset");
    need(dir, "dir");
    namespace fs = std::filesystem;
    for (std::size_t c = 0; c < d->ds.num_classes(); ++c) {
      const fs::path cls = fs::path(dir) / d->ds.class_names[c];
      std::error_code ec;
      fs::create_directories(cls, ec);
      if (ec) fail(ErrorKind::kIo, "cannot create " + cls.string() + ": " + ec.message());
      for (std::size_t i = 0; i < d->ds.images[c].size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%04zu.png", i);
        write_png((cls / name).string(), d->ds.images[c][i]);
      }
    }
  });
}

void tsar_dataset_free(tsar_dataset* d) { delete d; }

tsar_status tsar_model_create(const char* preset, const char* mode, int64_t num_classes, uint64_t seed,
                              tsar_model** out) {
  return guarded([&] {
    need(preset, "preset");
    need(mode, "mode");
    need(out, "out");
    const RunMode m = RunMode::parse(mode);
    TsarModel model = TsarModel::build(preset_config(preset, m.variant, num_classes), seed);
    if (model.has_regulator()) model.init_regulation_bias(m.bias);
    *out = new tsar_model{std::move(model), m, json{{"mode", m.str()}, {"preset", preset}, {"seed", seed}}};
  });
}

tsar_status tsar_model_load(const char* path, tsar_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    const Checkpoint ck = load_checkpoint(path);
    TsarModel model = model_from_checkpoint(ck);
    const RunMode mode = mode_of(model, ck.run_config);
    *out = new tsar_model{std::move(model), mode, ck.run_config};
  });
}

tsar_status tsar_model_save(const tsar_model* m, const char* path, const char* run_config_json, int f32) {
  return guarded([&] {
    need(m, "model");
    need(path, "path");
    json run = m->run_config;
    if (run_config_json != nullptr && *run_config_json != '\0') run = json::parse(run_config_json);
    if (!run.is_object()) fail(ErrorKind::kConfig, "run config must be a JSON object");
    if (!run.contains("mode")) run["mode"] = m->mode.str();
    save_checkpoint(path, m->model, run, f32 ? PayloadType::kF32 : PayloadType::kF64);
  });
}

tsar_status tsar_model_info(const tsar_model* m, char** info_json) {
  return guarded([&] {
    need(m, "model");
    give(info_json, json{{"mode", m->mode.str()},
                         {"architecture", model_config_to_json(m->model.config())},
                         {"parameter_count", m->model.parameter_count()},
                         {"run_config", m->run_config}});
  });
}

tsar_status tsar_model_mean_gate(const tsar_model* m, const tsar_dataset* d, int probe, uint64_t seed, double* mean) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    need(mean, "mean");
    if (!m->model.has_regulator()) fail(ErrorKind::kInvalidArgument, "model has no regulator");
    const std::vector<Sample> p = draw_probe(d->ds, probe, seed);
    *mean = probe_gate_stats(m->model, d->ds, p).second;
  });
}

void tsar_model_free(tsar_model* m) { delete m; }

tsar_status tsar_meta_train(tsar_model* m, const tsar_dataset* d, const char* config_json, tsar_record_fn on_record,
                            void* user, char** summary_json) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    Fields f(config_json, "meta");
    MetaConfig c;
    std::string order = meta_order_name(c.order);
    f.get("iterations", c.iterations);
    f.get("inner_lr", c.inner_lr);
    f.get("outer_lr", c.outer_lr);
    f.get("order", order);
    f.get("inner", c.batch.inner);
    f.get("retention_same", c.batch.retention_same);
    f.get("retention_other", c.batch.retention_other);
    f.get("probe_size", c.probe_size);
    f.get("seed", c.seed);
    f.done();
    if (order == "first") {
      c.order = MetaOrder::kFirst;
    } else if (order == "second") {
      c.order = MetaOrder::kSecond;
    } else {
      fail(ErrorKind::kConfig, "meta.order: expected first or second, got '" + order + "'");
    }
    if (c.iterations < 0) fail(ErrorKind::kConfig, "meta.iterations: must be >= 0");

    MetaLogRecord last;
    int aborted = 0;
    TsarModel trained = meta_train(m->model, d->ds, c, [&](const MetaLogRecord& r) {
      last = r;
      aborted += r.aborted ? 1 : 0;
      if (on_record == nullptr) return;
      const auto& p = r.gate_percentiles;
      const json rec{{"iter", r.iter},
                     {"retention_acc", r.retention_acc},
                     {"retention_loss", r.retention_loss},
                     {"gate_mean", r.mean_gate},
                     {"gate_p1", p[0]},
                     {"gate_p25", p[1]},
                     {"gate_p50", p[2]},
                     {"gate_p75", p[3]},
                     {"gate_p99", p[4]},
                     {"wallclock_ms", r.wallclock_ms},
                     {"aborted", r.aborted}};
      on_record(rec.dump().c_str(), user);
    });
    m->model = std::move(trained);
    m->run_config["meta"] = json{{"iterations", c.iterations}, {"inner_lr", c.inner_lr}, {"outer_lr", c.outer_lr},
                                 {"order", meta_order_name(c.order)}, {"inner", c.batch.inner},
                                 {"retention_same", c.batch.retention_same},
                                 {"retention_other", c.batch.retention_other}, {"probe_size", c.probe_size},
                                 {"seed", c.seed}};
    m->run_config["dataset"] = d->source;
    if (summary_json != nullptr) {
      give(summary_json, json{{"iterations", c.iterations},
                              {"final_retention_acc", last.retention_acc},
                              {"final_retention_loss", last.retention_loss},
                              {"final_gate_mean", last.mean_gate},
                              {"aborted_iterations", aborted}});
    }
  });
}

tsar_status tsar_transfer(const tsar_model* m, const tsar_dataset* d, const char* config_json, const char* trace_path,
                          char** result_json) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    json note;
    const TransferConfig c = parse_transfer_config(config_json, &note);
    TransferResult r = transfer_from(m->model, m->mode.bias, d->ds, c, c.seed + 1);
    r.trace.meta["mode"] = m->mode.str();
    r.trace.meta["version"] = TSAR_VERSION;
    if (!note.is_null()) r.trace.meta["run"] = note;
    if (trace_path != nullptr && *trace_path != '\0') {
      write_trace(trace_path, r.trace);
      r.trace_path = trace_path;
    }
    json j = r.to_json();
    j["mode"] = m->mode.str();
    j["version"] = TSAR_VERSION;
    if (!note.is_null()) j["run"] = note;
    give(result_json, j);
  });
}

tsar_status tsar_lr_grid_search(const tsar_model* m, const tsar_dataset* d, const char* config_json, const double* grid,
                                size_t n, char** result_json) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    if (n > 0) need(grid, "grid");
    TransferConfig c = parse_transfer_config(config_json);
    if (c.treatment != Treatment::kNormal) fail(ErrorKind::kConfig, "grid search runs the normal treatment only");
    c.detail = TraceDetail::kSummary;
    TsarModel base = m->model;
    base.reset_for_transfer(c.num_tasks, m->mode.bias, Treatment::kNormal, c.seed + 1);
    const GridResult g = lr_grid_search(base, d->ds, c, std::vector<double>(grid, grid + n));
    json rows = json::array();
    for (const GridRow& r : g.rows)
      rows.push_back(json{{"lr", r.lr}, {"final_retention", r.final_retention}, {"diverged", r.diverged}});
    give(result_json, json{{"rows", rows},
                           {"best_lr", g.best_lr ? json(*g.best_lr) : json(nullptr)},
                           {"config", transfer_config_to_json(c)},
                           {"mode", m->mode.str()}});
  });
}

tsar_status tsar_encoding_cluster_check(const tsar_model* m, const tsar_dataset* d, int per_class, int reduce_dims,
                                        int k, char** result_json) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    if (!m->model.has_regulator()) fail(ErrorKind::kInvalidArgument, "model has no regulator to encode with");
    if (per_class < 1) fail(ErrorKind::kInvalidArgument, "per_class must be >= 1");
    std::vector<double> data;
    std::vector<int> labels;
    int dim = 0;
    for (std::size_t c = 0; c < d->ds.num_classes(); ++c) {
      const auto& imgs = d->ds.images[c];
      for (std::size_t i = 0; i < imgs.size() && i < static_cast<std::size_t>(per_class); ++i) {
        const Tensor enc = m->model.regulate(imgs[i]).first;
        dim = static_cast<int>(enc.numel());
        data.insert(data.end(), enc.data().begin(), enc.data().end());
        labels.push_back(static_cast<int>(c));
      }
    }
    const analysis::ClusterCheck r =
        analysis::encoding_cluster_check(data, static_cast<int>(labels.size()), dim, labels, reduce_dims, k);
    give(result_json, json{{"accuracy", r.accuracy},
                           {"chance", 1.0 / static_cast<double>(d->ds.num_classes())},
                           {"components", r.components},
                           {"explained", r.explained},
                           {"warning", r.warning},
                           {"samples", labels.size()}});
  });
}

tsar_status tsar_trace_read(const char* path, tsar_trace** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tsar_trace{read_trace(path)};
  });
}

tsar_status tsar_trace_synthetic(const char* kind, const char* config_json, uint64_t seed, tsar_trace** out) {
  return guarded([&] {
    need(kind, "kind");
    need(out, "out");
    analysis::SyntheticSpec spec;
    const std::string k = kind;
    if (k == "modular") {
      spec.kind = analysis::SyntheticKind::kModular;
    } else if (k == "random") {
      spec.kind = analysis::SyntheticKind::kRandom;
    } else {
      fail(ErrorKind::kConfig, "synthetic trace kind must be modular or random, got '" + k + "'");
    }
    Fields f(config_json, "synthetic");
    f.get("synapses", spec.num_synapses);
    f.get("tasks", spec.num_tasks);
    f.get("per_task", spec.per_task);
    f.done();
    *out = new tsar_trace{analysis::synthetic_trace(spec, seed)};
  });
}

tsar_status tsar_trace_write(const tsar_trace* t, const char* path) {
  return guarded([&] {
    need(t, "trace");
    need(path, "path");
    write_trace(path, t->trace);
  });
}

tsar_status tsar_trace_info(const tsar_trace* t, char** info_json) {
  return guarded([&] {
    need(t, "trace");
    json layers = json::array();
    for (const TraceLayer& l : t->trace.layers) {
      layers.push_back(json{{"name", l.name}, {"shape", l.shape}, {"tracked", l.tracked.size()}});
    }
    give(info_json, json{{"detail", trace_detail_name(t->trace.detail)},
                         {"steps", t->trace.steps.size()},
                         {"tasks", analysis::trace_tasks(t->trace)},
                         {"layers", layers},
                         {"meta", t->trace.meta}});
  });
}

void tsar_trace_free(tsar_trace* t) { delete t; }

tsar_status tsar_analyze(const tsar_trace* const* traces, size_t n, const char* analysis, const char* options_json,
                         char** result_json) {
  return guarded([&] {
    need(analysis, "analysis");
    if (n == 0) fail(ErrorKind::kInvalidArgument, "no traces given");
    need(traces, "traces");
    for (size_t i = 0; i < n; ++i) need(traces[i], "trace");
    const AnalysisOptions o = parse_analysis_options(options_json);
    const std::string what = analysis;
    json files = json::object();
    json summary;
    if (what == "class-nodes") {
      std::vector<RegulationTrace> runs;
      for (size_t i = 0; i < n; ++i) {
        require_detail(traces[i]->trace, TraceDetail::kFull, what);
        runs.push_back(traces[i]->trace);
      }
      const analysis::ClassNodeDynamics c = analysis::class_node_dynamics(runs, o.horizon);
      std::vector<double> within_k, after_k;
      for (std::size_t k = 0; k < c.within_pos.mean.size(); ++k) within_k.push_back(static_cast<double>(k));
      for (std::size_t k = 0; k < c.after_pos.mean.size(); ++k) after_k.push_back(static_cast<double>(k));
      files["class_nodes_within.csv"] = analysis::series_csv(
          {"step", "pos_mean", "pos_sd", "neg_mean", "neg_sd"},
          {within_k, c.within_pos.mean, c.within_pos.sd, c.within_neg.mean, c.within_neg.sd});
      files["class_nodes_after.csv"] = analysis::series_csv(
          {"steps_since", "pos_mean", "pos_sd", "neg_mean", "neg_sd"},
          {after_k, c.after_pos.mean, c.after_pos.sd, c.after_neg.mean, c.after_neg.sd});
      summary = json{{"runs", c.runs}};
    } else if (n == 1) {
      summary = analyze_one(traces[0]->trace, what, o, "", files);
    } else {
      summary = json::array();
      for (size_t i = 0; i < n; ++i) summary.push_back(analyze_one(traces[i]->trace, what, o, "run" + std::to_string(i) + "_", files));
    }
    give(result_json, json{{"analysis", what}, {"files", files}, {"summary", summary}});
  });
}

tsar_status tsar_stats(const char* test, const double* a, size_t na, const double* b, size_t nb, char** result_json) {
  return guarded([&] {
    need(test, "test");
    if (na > 0) need(a, "a");
    if (nb > 0) need(b, "b");
    const std::span<const double> x(a, na), y(b, nb);
    const std::string t = test;
    json j;
    if (t == "mann-whitney") {
      const stats::MannWhitney m = stats::mann_whitney(x, y);
      j = json{{"u", m.u}, {"z", m.z}, {"p_two_sided", m.p_two_sided}, {"p_less", m.p_less},
               {"p_greater", m.p_greater}, {"exact", m.exact}, {"ties", m.ties}};
    } else if (t == "sign") {
      const stats::SignTest s = stats::sign_test(x, y);
      j = json{{"wins", s.wins}, {"losses", s.losses}, {"ties", s.ties}, {"p_greater", s.p_greater},
               {"p_two_sided", s.p_two_sided}};
    } else if (t == "bootstrap") {
      const stats::Interval i = stats::bootstrap_ci(x);
      j = json{{"estimate", i.estimate}, {"lo", i.lo}, {"hi", i.hi}, {"level", 0.99}, {"resamples", 1000}};
    } else if (t == "pearson") {
      j = json{{"r", stats::pearson(x, y)}};
    } else if (t == "spearman") {
      j = json{{"rho", stats::spearman(x, y)}};
    } else {
      fail(ErrorKind::kInvalidArgument, "unknown test '" + t + "'");
    }
    give(result_json, j);
  });
}

tsar_status tsar_gradcheck(int instances, uint64_t seed, int f32, const char* fault, int* passed, char** report_json) {
  return guarded([&] {
    need(passed, "passed");
    std::optional<PrimitiveKind> kind;
    if (fault != nullptr && *fault != '\0') kind = parse_primitive(fault);
    const CheckPrecision p = f32 ? CheckPrecision::kF32 : CheckPrecision::kF64;
    const SelfCheckReport r = run_self_checks(instances, seed, p, kind);
    json rows = json::array();
    for (const CheckRow& row : r.rows) {
      rows.push_back(json{{"check", row.name}, {"instances", row.instances}, {"worst", row.worst},
                          {"threshold", row.threshold}, {"passed", row.passed}});
    }
    *passed = r.passed() ? 1 : 0;
    if (report_json != nullptr) {
      give(report_json, json{{"precision", f32 ? "f32" : "f64"},
                             {"fd_step", check_tolerance(p).eps},
                             {"rows", rows},
                             {"seconds", r.seconds},
                             {"fault", fault != nullptr ? json(fault) : json(nullptr)},
                             {"passed", r.passed()}});
    }
  });
}

}  // extern "C"
