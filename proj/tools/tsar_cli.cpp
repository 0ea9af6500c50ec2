// tsar command-line front end. Talks to the library only through tsar_c.h.
#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tsar/tsar_c.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliError {
  int code;
  std::string message;
};

int exit_code(tsar_status s) {
  return (s == TSAR_ERR_CONFIG || s == TSAR_ERR_INVALID_ARGUMENT) ? 2 : 1;
}

void check(tsar_status s, const std::string& what) {
  if (s != TSAR_OK) throw CliError{exit_code(s), what + ": " + tsar_last_error()};
}

[[noreturn]] void usage_error(const std::string& msg) { throw CliError{2, msg}; }

json take(char* text) {
  json j = json::parse(text);
  tsar_string_free(text);
  return j;
}

struct DatasetFree {
  void operator()(tsar_dataset* d) const { tsar_dataset_free(d); }
};
struct ModelFree {
  void operator()(tsar_model* m) const { tsar_model_free(m); }
};
struct TraceFree {
  void operator()(tsar_trace* t) const { tsar_trace_free(t); }
};
using Dataset = std::unique_ptr<tsar_dataset, DatasetFree>;
using Model = std::unique_ptr<tsar_model, ModelFree>;
using Trace = std::unique_ptr<tsar_trace, TraceFree>;

// Output directory built under a sibling staging name and moved into place on
// commit; dropped without trace otherwise.
class Staged {
 public:
  explicit Staged(fs::path target) : target_(std::move(target)) {
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  Staged(const Staged&) = delete;
  Staged& operator=(const Staged&) = delete;
  ~Staged() {
    std::error_code ec;
    if (!committed_) fs::remove_all(staging_, ec);
  }
  const fs::path& dir() const { return staging_; }
  fs::path file(const std::string& name) const { return staging_ / name; }
  void write(const std::string& name, const std::string& text) const {
    const fs::path p = staging_ / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw CliError{1, "cannot write " + p.string()};
  }
  void write_json(const std::string& name, const json& j) const { write(name, j.dump(2) + "\n"); }
  void commit() {
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::path old = target_;
    old += ".old";
    fs::remove_all(old);
    if (fs::exists(target_)) fs::rename(target_, old);
    fs::rename(staging_, target_);
    fs::remove_all(old);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool committed_ = false;
};

// Runs fn(i) for i in [0, n) on up to jobs threads; the first error wins.
template <class Fn>
void fan_out(int n, int jobs, Fn fn) {
  std::atomic<int> next{0};
  std::mutex mu;
  std::optional<CliError> first;
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (const CliError& e) {
        std::lock_guard lock(mu);
        if (!first) first = e;
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!first) first = CliError{1, e.what()};
      }
    }
  };
  const int t = std::max(1, std::min(jobs, n));
  std::vector<std::thread> pool;
  for (int i = 1; i < t; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (first) throw *first;
}

json stats(const std::string& test, const std::vector<double>& a, const std::vector<double>* b = nullptr) {
  char* out = nullptr;
  check(tsar_stats(test.c_str(), a.data(), a.size(), b ? b->data() : nullptr, b ? b->size() : 0, &out), test);
  return take(out);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Datasets

struct DataOptions {
  std::string data;
  int classes = 0;
  int per_class = 20;
  std::string style = "strokes";
  double noise = 0.05;
  std::uint64_t glyph_seed = 1;
  std::string resize = "bilinear";
  int min_per_class = 1;
  int train_per_class = 0;
  int test_per_class = 0;
  int size = 28;
  int channels = 3;

  void add(CLI::App* app, int default_classes, int default_per_class, std::uint64_t default_glyph_seed) {
    classes = default_classes;
    per_class = default_per_class;
    glyph_seed = default_glyph_seed;
    app->add_option("--data", data,
                     "image folder (one subfolder per class); relative names also resolve under $TSAR_DATA_DIR; "
                     "synthetic glyphs when omitted");
    app->add_option("--classes", classes, "class count (synthetic) or first n folder classes (0 keeps all)");
    app->add_option("--per-class", per_class, "synthetic images per class");
    app->add_option("--style", style, "synthetic glyph style")->check(CLI::IsMember({"strokes", "blobs"}));
    app->add_option("--noise", noise, "synthetic pixel noise");
    app->add_option("--glyph-seed", glyph_seed, "synthetic dataset seed");
    app->add_option("--resize", resize, "folder resize filter")->check(CLI::IsMember({"bilinear", "nearest"}));
    app->add_option("--min-per-class", min_per_class, "drop folder classes with fewer images");
    app->add_option("--train-per-class", train_per_class, "meta-training split: train images per class (0: default)");
    app->add_option("--test-per-class", test_per_class, "meta-training split: test images per class (0: default)");
    app->add_option("--size", size, "image height and width");
    app->add_option("--channels", channels, "image channels");
  }

  // Resolves the folder path or fails with a usage error before any work.
  std::string folder() const {
    if (data.empty()) return {};
    fs::path p(data);
    if (fs::is_directory(p)) return p.string();
    const char* root = std::getenv("TSAR_DATA_DIR");
    if (p.is_relative() && root != nullptr && fs::is_directory(fs::path(root) / p)) return (fs::path(root) / p).string();
    usage_error("dataset folder not found: " + data);
  }

  json config() const {
    json j{{"channels", channels}, {"height", size}, {"width", size}};
    if (data.empty()) {
      j["classes"] = classes;
      j["per_class"] = per_class;
      j["style"] = style;
      j["noise"] = noise;
    } else {
      j["classes"] = classes;
      j["resize"] = resize;
      j["min_per_class"] = min_per_class;
    }
    if (train_per_class > 0) j["train_per_class"] = train_per_class;
    if (test_per_class > 0) j["test_per_class"] = test_per_class;
    return j;
  }

  json resolved() const {
    json j = config();
    if (data.empty()) {
      j["kind"] = "synthetic";
      j["glyph_seed"] = glyph_seed;
    } else {
      j["kind"] = "folder";
      j["path"] = folder();
    }
    return j;
  }

  Dataset load() const {
    tsar_dataset* d = nullptr;
    const std::string cfg = config().dump();
    if (data.empty()) {
      check(tsar_dataset_synthetic(cfg.c_str(), glyph_seed, &d), "synthetic dataset");
    } else {
      const std::string path = folder();
      check(tsar_dataset_load_folder(path.c_str(), cfg.c_str(), &d), "dataset " + path);
    }
    return Dataset(d);
  }
};

json dataset_info(const tsar_dataset* d, int probe = 0) {
  char* out = nullptr;
  check(tsar_dataset_info(d, probe, &out), "dataset info");
  return take(out);
}

json model_info(const tsar_model* m) {
  char* out = nullptr;
  check(tsar_model_info(m, &out), "model info");
  return take(out);
}

// ---------------------------------------------------------------------------
// meta-train

struct MetaOptions {
  std::string mode = "grow";
  std::string preset = "tiny";
  std::string regime = "scarce";
  int iterations = 1000;
  double inner_lr = 1e-2;
  double outer_lr = 1e-3;
  std::string order = "second";
  int inner = 20;
  int retention_same = 20;
  int retention_other = 64;
  int probe_size = 64;
  std::uint64_t seed = 0;
  int seeds = 1;
  std::vector<double> sweep_bias;
  bool f32 = false;
  int jobs = 1;
  int log_every = 50;
  std::string out = "runs/meta";
  DataOptions data;
};

void meta_train_one(const MetaOptions& o, const tsar_dataset* ds, const json& dataset_json, const std::string& mode,
                    std::uint64_t seed, const fs::path& target, bool verbose) {
  const json run{{"command", "meta-train"},
                 {"version", tsar_version()},
                 {"mode", mode},
                 {"preset", o.preset},
                 {"regime", o.regime},
                 {"seed", seed},
                 {"dataset", dataset_json},
                 {"meta",
                  {{"iterations", o.iterations},
                   {"inner_lr", o.inner_lr},
                   {"outer_lr", o.outer_lr},
                   {"order", o.order},
                   {"inner", o.inner},
                   {"retention_same", o.retention_same},
                   {"retention_other", o.retention_other},
                   {"probe_size", o.probe_size},
                   {"seed", seed}}},
                 {"f32", o.f32}};
  const int classes = dataset_json["classes"].get<int>();
  tsar_model* raw = nullptr;
  check(tsar_model_create(o.preset.c_str(), mode.c_str(), classes, seed, &raw), "model");
  Model model(raw);

  Staged stage(target);
  std::ofstream log(stage.file("meta_log.jsonl"));
  log << json{{"config", run}}.dump() << "\n";
  struct Sink {
    std::ofstream* log;
    bool verbose;
    int every;
    std::string label;
  } sink{&log, verbose, std::max(1, o.log_every), target.filename().string()};
  auto on_record = [](const char* rec, void* user) {
    auto* s = static_cast<Sink*>(user);
    *s->log << rec << "\n";
    if (!s->verbose) return;
    const json j = json::parse(rec);
    const int it = j["iter"].get<int>();
    if (it % s->every == 0) {
      std::printf("[%s] iter %d retention %.3f loss %.4f gate %.3e\n", s->label.c_str(), it,
                  j["retention_acc"].get<double>(), j["retention_loss"].get<double>(), j["gate_mean"].get<double>());
      std::fflush(stdout);
    }
  };
  char* summary_text = nullptr;
  check(tsar_meta_train(model.get(), ds, run["meta"].dump().c_str(), on_record, &sink, &summary_text), "meta-train");
  const json summary = take(summary_text);
  log.close();
  if (!log) throw CliError{1, "cannot write meta log"};

  check(tsar_model_save(model.get(), stage.file("model.ck").c_str(), run.dump().c_str(), o.f32 ? 1 : 0), "save");
  json run_out = run;
  run_out["summary"] = summary;
  stage.write_json("run.json", run_out);
  stage.commit();
  std::printf("%s: final retention %.3f, gate mean %.3e -> %s\n", mode.c_str(),
              summary["final_retention_acc"].get<double>(), summary["final_gate_mean"].get<double>(),
              (target / "model.ck").c_str());
}

int run_meta_train(const MetaOptions& o) {
  if (o.seeds < 1) usage_error("--seeds must be >= 1");
  if (o.iterations < 1) usage_error("--iterations must be >= 1");
  DataOptions data = o.data;
  if (data.classes == 0 && data.data.empty()) data.classes = o.regime == "scarce" ? 25 : 100;
  if (data.classes == 0 && o.regime == "scarce") data.classes = 25;
  (void)data.folder();

  std::vector<std::string> modes;
  if (o.sweep_bias.empty()) {
    modes.push_back(o.mode);
  } else {
    for (double b : o.sweep_bias) {
      std::ostringstream s;
      s << "custom_bias=" << b;
      modes.push_back(s.str());
    }
  }
  // Reject bad modes or presets before touching the data.
  for (const auto& m : modes) {
    tsar_model* probe = nullptr;
    check(tsar_model_create(o.preset.c_str(), m.c_str(), 2, 0, &probe), "model");
    tsar_model_free(probe);
  }

  const Dataset ds = data.load();
  json dataset_json = dataset_info(ds.get());
  dataset_json["request"] = data.resolved();

  struct Job {
    std::string mode;
    std::uint64_t seed;
    fs::path target;
  };
  std::vector<Job> jobs;
  for (const auto& m : modes) {
    for (int s = 0; s < o.seeds; ++s) {
      fs::path t = o.out;
      if (modes.size() > 1) t /= "bias_" + m.substr(m.find('=') + 1);
      if (o.seeds > 1) t /= "seed_" + std::to_string(o.seed + static_cast<std::uint64_t>(s));
      jobs.push_back({m, o.seed + static_cast<std::uint64_t>(s), t});
    }
  }
  const bool verbose = jobs.size() == 1 || o.jobs == 1;
  fan_out(static_cast<int>(jobs.size()), o.jobs, [&](int i) {
    const Job& j = jobs[static_cast<std::size_t>(i)];
    meta_train_one(o, ds.get(), dataset_json, j.mode, j.seed, j.target, verbose);
  });
  return 0;
}

// ---------------------------------------------------------------------------
// transfer

struct TransferOptions {
  std::string checkpoint;
  std::string mode;
  std::string preset;
  int tasks = 20;
  int images_per_task = 10;
  int validation_per_class = 10;
  double lr = 1e-2;
  std::vector<double> lr_grid;
  std::uint64_t seed = 0;
  int seeds = 1;
  std::string treatment = "normal";
  std::string detail = "tracked";
  double tracked_lo = 0.75;
  double tracked_hi = 0.99;
  int max_tracked = 2000;
  int jobs = 1;
  std::string out = "runs/transfer";
  DataOptions data;
};

// Differences between two architecture descriptions, ignoring the head size.
std::vector<std::string> architecture_diff(const json& a, const json& b) {
  std::vector<std::string> diff;
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (it.key() == "num_classes") continue;
    if (!b.contains(it.key()) || b[it.key()] != it.value()) diff.push_back(it.key());
  }
  for (auto it = b.begin(); it != b.end(); ++it)
    if (!a.contains(it.key())) diff.push_back(it.key());
  return diff;
}

Model transfer_model(const TransferOptions& o, json& source) {
  tsar_model* raw = nullptr;
  if (!o.checkpoint.empty()) {
    if (!fs::exists(o.checkpoint)) usage_error("checkpoint not found: " + o.checkpoint);
    check(tsar_model_load(o.checkpoint.c_str(), &raw), "checkpoint " + o.checkpoint);
    Model m(raw);
    const json info = model_info(m.get());
    if (!o.mode.empty() && o.mode != info["mode"].get<std::string>()) {
      usage_error("--mode " + o.mode + " does not match checkpoint mode " + info["mode"].get<std::string>());
    }
    if (!o.preset.empty()) {
      tsar_model* fresh = nullptr;
      const std::string mode = info["mode"].get<std::string>();
      check(tsar_model_create(o.preset.c_str(), mode.c_str(), info["architecture"].value("num_classes", 2), 0, &fresh),
            "preset " + o.preset);
      const json want = model_info(fresh)["architecture"];
      tsar_model_free(fresh);
      const auto diff = architecture_diff(want, info["architecture"]);
      if (!diff.empty()) {
        std::string fields;
        for (const auto& f : diff) fields += (fields.empty() ? "" : ", ") + f;
        usage_error("checkpoint " + o.checkpoint + " does not match preset " + o.preset + " (differs in: " + fields +
                    ")");
      }
    }
    source = json{{"checkpoint", fs::absolute(o.checkpoint).string()}, {"mode", info["mode"]}};
    return m;
  }
  const std::string mode = o.mode.empty() ? "grow" : o.mode;
  if (mode != "scratch" && o.treatment != "reservoir") {
    usage_error("transfer needs --checkpoint unless --mode scratch or --treatment reservoir");
  }
  const std::string preset = o.preset.empty() ? "tiny" : o.preset;
  check(tsar_model_create(preset.c_str(), mode.c_str(), o.tasks, o.seed, &raw), "model");
  source = json{{"fresh", {{"preset", preset}, {"mode", mode}, {"seed", o.seed}}}};
  return Model(raw);
}

int run_transfer(const TransferOptions& o) {
  if (o.seeds < 1) usage_error("--seeds must be >= 1");
  DataOptions data = o.data;
  if (data.classes == 0 && data.data.empty()) data.classes = o.tasks;
  (void)data.folder();
  json source;
  const Model model = transfer_model(o, source);
  const Dataset ds = data.load();

  json base{{"num_tasks", o.tasks},
            {"images_per_task", o.images_per_task},
            {"validation_per_class", o.validation_per_class},
            {"lr", o.lr},
            {"treatment", o.treatment},
            {"detail", o.detail},
            {"tracked_lo", o.tracked_lo},
            {"tracked_hi", o.tracked_hi},
            {"max_tracked", o.max_tracked}};
  json run{{"command", "transfer"}, {"version", tsar_version()}, {"model", source}, {"dataset", data.resolved()},
           {"seed", o.seed},        {"seeds", o.seeds}};

  json grid_json;
  if (!o.lr_grid.empty()) {
    json cfg = base;
    cfg["seed"] = o.seed;
    cfg["treatment"] = "normal";
    char* out = nullptr;
    check(tsar_lr_grid_search(model.get(), ds.get(), cfg.dump().c_str(), o.lr_grid.data(), o.lr_grid.size(), &out),
          "lr grid");
    grid_json = take(out);
    if (grid_json["best_lr"].is_null()) throw CliError{1, "lr grid: every learning rate diverged"};
    base["lr"] = grid_json["best_lr"];
    std::printf("lr grid: best lr %g\n", grid_json["best_lr"].get<double>());
    run["lr_grid"] = grid_json;
  }
  run["transfer"] = base;

  const int n = o.seeds;
  std::vector<json> results(static_cast<std::size_t>(n));
  Staged stage(o.out);
  fan_out(n, o.jobs, [&](int i) {
    const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
    json cfg = base;
    cfg["seed"] = seed;
    cfg["annotate"] = run;
    const std::string sub = n > 1 ? "seed_" + std::to_string(seed) + "/" : "";
    if (!sub.empty()) fs::create_directories(stage.dir() / sub);
    const std::string trace = (stage.dir() / (sub + "trace.jsonl")).string();
    char* out = nullptr;
    check(tsar_transfer(model.get(), ds.get(), cfg.dump().c_str(), trace.c_str(), &out),
          "transfer seed " + std::to_string(seed));
    json r = take(out);
    r["trace_path"] = sub + "trace.jsonl";
    stage.write_json(sub + "result.json", r);
    if (n > 1) {
      std::printf("seed %llu: final retention %.3f\n", static_cast<unsigned long long>(seed),
                  r["final_retention"].get<double>());
      std::fflush(stdout);
    }
    results[static_cast<std::size_t>(i)] = std::move(r);
  });

  std::vector<double> finals;
  std::vector<double> curve_means;
  json per_seed = json::array();
  for (int i = 0; i < n; ++i) {
    const json& r = results[static_cast<std::size_t>(i)];
    finals.push_back(r["final_retention"].get<double>());
    curve_means.push_back(mean(r["past_task_curve"].get<std::vector<double>>()));
    per_seed.push_back(json{{"seed", o.seed + static_cast<std::uint64_t>(i)},
                            {"final_retention", finals.back()},
                            {"past_task_curve_mean", curve_means.back()},
                            {"diverged", r["diverged"]}});
  }
  json summary = run;
  summary["runs"] = per_seed;
  summary["final_retention_mean"] = mean(finals);
  summary["past_task_curve_mean"] = mean(curve_means);
  if (n > 1) summary["final_retention_ci"] = stats("bootstrap", finals);
  stage.write_json("summary.json", summary);
  stage.commit();
  std::printf("final retention mean %.3f over %d run%s -> %s\n", mean(finals), n, n > 1 ? "s" : "", o.out.c_str());
  if (n > 1) {
    const json& ci = summary["final_retention_ci"];
    std::printf("99%% bootstrap interval [%.3f, %.3f]\n", ci["lo"].get<double>(), ci["hi"].get<double>());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
  std::vector<std::string> traces;
  std::string synthetic;
  int synapses = 200;
  int tasks = 10;
  int per_task = 20;
  std::uint64_t synthetic_seed = 0;
  std::vector<std::string> analyses;
  bool all = false;
  std::string layer;
  std::vector<double> thresholds;
  double lo = -1.0;
  double hi = -1.0;
  int bins = 0;
  double top_fraction = 0.0;
  int horizon = 0;
  int bins_per_decade = 0;
  // Encoding cluster check.
  std::string checkpoint;
  int cluster_per_class = 20;
  int reduce_dims = 50;
  int k = 5;
  std::string out = "runs/analysis";
  DataOptions data;
};

const std::vector<std::string> kAnalyses = {"modularity", "timelag",     "spikes",     "powerlaw",
                                            "cp-signs",   "class-nodes", "activity-oracle"};

json analysis_options(const AnalyzeOptions& o) {
  json j = json::object();
  if (!o.layer.empty()) j["layer"] = o.layer;
  if (!o.thresholds.empty()) j["thresholds"] = o.thresholds;
  if (o.lo >= 0.0) j["lo"] = o.lo;
  if (o.hi >= 0.0) j["hi"] = o.hi;
  if (o.bins > 0) j["bins"] = o.bins;
  if (o.top_fraction > 0.0) j["top_fraction"] = o.top_fraction;
  if (o.horizon > 0) j["horizon"] = o.horizon;
  if (o.bins_per_decade > 0) j["bins_per_decade"] = o.bins_per_decade;
  return j;
}

void print_summary(const std::string& name, const json& summary) {
  std::printf("%s:\n", name.c_str());
  for (auto it = summary.begin(); it != summary.end(); ++it) {
    json v = it.value();
    std::string tail;
    if (v.is_array() && v.size() > 6) {
      tail = " (" + std::to_string(v.size()) + " values)";
      v.erase(v.begin() + 6, v.end());
    }
    std::printf("  %s: %s%s\n", it.key().c_str(), v.dump().c_str(), tail.c_str());
  }
}

int run_analyze(const AnalyzeOptions& o) {
  std::vector<std::string> selected = o.all ? kAnalyses : o.analyses;
  const bool clusters = !o.checkpoint.empty();
  if (selected.empty() && !clusters) usage_error("no analysis selected (use --run NAME, --all, or --checkpoint)");
  if (!selected.empty() && o.traces.empty() && o.synthetic.empty()) usage_error("no trace given");
  if (!o.traces.empty() && !o.synthetic.empty()) usage_error("give trace files or --synthetic, not both");
  for (const auto& t : o.traces)
    if (!fs::exists(t)) usage_error("trace not found: " + t);

  std::vector<Trace> traces;
  json inputs = json::array();
  if (!o.synthetic.empty()) {
    const json cfg{{"synapses", o.synapses}, {"tasks", o.tasks}, {"per_task", o.per_task}};
    tsar_trace* t = nullptr;
    check(tsar_trace_synthetic(o.synthetic.c_str(), cfg.dump().c_str(), o.synthetic_seed, &t), "synthetic trace");
    traces.emplace_back(t);
    inputs.push_back(json{{"synthetic", o.synthetic}, {"config", cfg}, {"seed", o.synthetic_seed}});
  }
  for (const auto& path : o.traces) {
    tsar_trace* t = nullptr;
    check(tsar_trace_read(path.c_str(), &t), "trace " + path);
    traces.emplace_back(t);
    inputs.push_back(json{{"path", fs::absolute(path).string()}});
  }
  std::vector<const tsar_trace*> handles;
  for (const auto& t : traces) handles.push_back(t.get());

  const json options = analysis_options(o);
  const json base{{"version", tsar_version()}, {"inputs", inputs}, {"options", options}};
  std::vector<std::string> skipped;
  for (const auto& name : selected) {
    char* out = nullptr;
    const tsar_status s = tsar_analyze(handles.data(), handles.size(), name.c_str(), options.dump().c_str(), &out);
    if (s == TSAR_ERR_INSUFFICIENT_DETAIL) {
      std::fprintf(stderr, "skipped %s: %s\n", name.c_str(), tsar_last_error());
      skipped.push_back(name);
      continue;
    }
    check(s, name);
    const json r = take(out);
    Staged stage(fs::path(o.out) / name);
    json manifest = base;
    manifest["analysis"] = name;
    manifest["summary"] = r["summary"];
    json files = json::array();
    if (!o.synthetic.empty() && traces.size() == 1) {
      check(tsar_trace_write(handles[0], stage.file("trace.jsonl").c_str()), "write trace");
      files.push_back("trace.jsonl");
    }
    for (auto it = r["files"].begin(); it != r["files"].end(); ++it) {
      stage.write(it.key(), it.value().get<std::string>());
      files.push_back(it.key());
    }
    manifest["files"] = files;
    stage.write_json("manifest.json", manifest);
    stage.commit();
    print_summary(name, r["summary"]);
  }

  if (clusters) {
    if (!fs::exists(o.checkpoint)) usage_error("checkpoint not found: " + o.checkpoint);
    (void)o.data.folder();
    tsar_model* raw = nullptr;
    check(tsar_model_load(o.checkpoint.c_str(), &raw), "checkpoint " + o.checkpoint);
    const Model m(raw);
    const Dataset ds = o.data.load();
    char* out = nullptr;
    check(tsar_encoding_cluster_check(m.get(), ds.get(), o.cluster_per_class, o.reduce_dims, o.k, &out), "clusters");
    const json r = take(out);
    Staged stage(fs::path(o.out) / "clusters");
    json manifest = base;
    manifest["analysis"] = "clusters";
    manifest["checkpoint"] = fs::absolute(o.checkpoint).string();
    manifest["dataset"] = o.data.resolved();
    manifest["cluster"] = {{"per_class", o.cluster_per_class}, {"reduce_dims", o.reduce_dims}, {"k", o.k}};
    manifest["summary"] = r;
    manifest["files"] = json::array();
    stage.write_json("manifest.json", manifest);
    stage.commit();
    print_summary("clusters", r);
  }
  return skipped.empty() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// gradcheck and dataset

int run_gradcheck(int instances, std::uint64_t seed, bool f32, const std::string& fault, const std::string& out) {
  int passed = 0;
  char* text = nullptr;
  check(tsar_gradcheck(instances, seed, f32 ? 1 : 0, fault.empty() ? nullptr : fault.c_str(), &passed, &text),
        "gradcheck");
  json report = take(text);
  for (const auto& row : report["rows"]) {
    std::printf("%-32s %4d  worst %.3e  threshold %.1e  %s\n", row["check"].get<std::string>().c_str(),
                row["instances"].get<int>(), row["worst"].get<double>(), row["threshold"].get<double>(),
                row["passed"].get<bool>() ? "ok" : "FAIL");
  }
  std::printf("%s\n", passed ? "all checks passed" : "gradient check FAILED");
  if (!out.empty()) {
    report["version"] = tsar_version();
    report["config"] = {{"instances", instances}, {"seed", seed}, {"f32", f32}, {"fault", fault}};
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fs::path tmp = p;
    tmp += ".partial";
    {
      std::ofstream f(tmp);
      f << report.dump(2) << "\n";
      if (!f) throw CliError{1, "cannot write " + out};
    }
    fs::rename(tmp, p);
  }
  return passed ? 0 : 1;
}

int run_synthesize(const DataOptions& d, const std::string& out) {
  if (!d.data.empty()) usage_error("synthesize builds glyphs; drop --data");
  const Dataset ds = d.load();
  Staged stage(out);
  check(tsar_dataset_write_png(ds.get(), stage.dir().c_str()), "write images");
  json info = dataset_info(ds.get());
  info["request"] = d.resolved();
  info["version"] = tsar_version();
  stage.write_json("dataset.json", info);
  stage.commit();
  std::printf("%d classes written to %s\n", info["classes"].get<int>(), out.c_str());
  return 0;
}

int run_inspect(const DataOptions& d, int probe) {
  (void)d.folder();
  const Dataset ds = d.load();
  json info = dataset_info(ds.get(), probe);
  info["request"] = d.resolved();
  info["version"] = tsar_version();
  std::cout << info.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-specific adaptive regulation: meta-training, transfer and trace analysis"};
  app.set_version_flag("--version", std::string(tsar_version()));
  app.set_config("--config", "", "INI file with one [section] per subcommand; flags on the command line win");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  MetaOptions meta;
  auto* mt = app.add_subcommand("meta-train", "meta-train a model on a class pool");
  mt->add_option("--mode", meta.mode, "grow | sculpt | custom_bias=<b> | anml | oml");
  mt->add_option("--preset", meta.preset, "model size")->check(CLI::IsMember({"tiny", "paper"}));
  mt->add_option("--regime", meta.regime, "scarce uses 25 classes, rich all")
      ->check(CLI::IsMember({"scarce", "rich"}));
  mt->add_option("--iterations,--iters", meta.iterations, "outer iterations");
  mt->add_option("--inner-lr", meta.inner_lr, "inner-loop learning rate");
  mt->add_option("--outer-lr", meta.outer_lr, "outer-loop learning rate");
  mt->add_option("--order", meta.order, "meta-gradient order")->check(CLI::IsMember({"first", "second"}));
  mt->add_option("--inner", meta.inner, "inner-loop images per iteration");
  mt->add_option("--retention-same", meta.retention_same, "retention images from the inner class");
  mt->add_option("--retention-other", meta.retention_other, "retention images from other classes");
  mt->add_option("--probe-size", meta.probe_size, "images used for gate statistics");
  mt->add_option("--seed", meta.seed, "first seed");
  mt->add_option("--seeds", meta.seeds, "number of seeds; more than one writes seed_<n>/ subdirectories");
  mt->add_option("--sweep-bias", meta.sweep_bias, "custom CP biases, one run each under bias_<b>/")->delimiter(',');
  mt->add_flag("--f32", meta.f32, "store the checkpoint in single precision");
  mt->add_option("--jobs,-j", meta.jobs, "runs in parallel");
  mt->add_option("--log-every", meta.log_every, "progress line interval");
  mt->add_option("--out,-o", meta.out, "output directory");
  meta.data.add(mt, 0, 20, 1);

  TransferOptions xfer;
  auto* tr = app.add_subcommand("transfer", "continual transfer over a sequence of unseen classes");
  tr->add_option("--checkpoint,-c", xfer.checkpoint, "meta-trained model (not needed for scratch or reservoir)");
  tr->add_option("--mode", xfer.mode, "model mode when no checkpoint is given, or a check against it");
  tr->add_option("--preset", xfer.preset, "expected preset; a checkpoint of another shape is rejected")
      ->check(CLI::IsMember({"tiny", "paper"}));
  tr->add_option("--tasks", xfer.tasks, "number of tasks");
  tr->add_option("--images-per-task", xfer.images_per_task, "training images per task");
  tr->add_option("--validation-per-class", xfer.validation_per_class, "held-out images per class");
  tr->add_option("--lr", xfer.lr, "learning rate");
  tr->add_option("--lr-grid", xfer.lr_grid, "pick the lr from this grid first")->delimiter(',');
  tr->add_option("--seed", xfer.seed, "first seed");
  tr->add_option("--seeds,--trials", xfer.seeds, "number of seeds; more than one writes seed_<n>/ subdirectories");
  tr->add_option("--treatment", xfer.treatment, "task curation or head treatment")
      ->check(CLI::IsMember({"normal", "enhancing", "diminishing", "mixed", "fixed", "reservoir"}));
  tr->add_option("--detail", xfer.detail, "trace detail")->check(CLI::IsMember({"summary", "tracked", "full"}));
  tr->add_option("--tracked-lo", xfer.tracked_lo, "lower activity quantile of tracked synapses");
  tr->add_option("--tracked-hi", xfer.tracked_hi, "upper activity quantile of tracked synapses");
  tr->add_option("--max-tracked", xfer.max_tracked, "cap on tracked synapses per layer");
  tr->add_option("--jobs,-j", xfer.jobs, "seeds in parallel");
  tr->add_option("--out,-o", xfer.out, "output directory");
  xfer.data.add(tr, 0, 40, 1001);

  AnalyzeOptions an;
  auto* az = app.add_subcommand("analyze", "analyses over regulation traces");
  az->add_option("traces", an.traces, "trace files");
  az->add_option("--synthetic", an.synthetic, "generate a synthetic trace instead")
      ->check(CLI::IsMember({"modular", "random"}));
  az->add_option("--synapses", an.synapses, "synthetic trace synapses");
  az->add_option("--tasks", an.tasks, "synthetic trace tasks");
  az->add_option("--per-task", an.per_task, "synthetic trace steps per task");
  az->add_option("--synthetic-seed", an.synthetic_seed, "synthetic trace seed");
  az->add_option("--run,-r", an.analyses, "analysis to run (repeatable)")
      ->check(CLI::IsMember(kAnalyses))
      ->delimiter(',');
  az->add_flag("--all", an.all, "run every trace analysis");
  az->add_option("--layer", an.layer, "restrict to one layer");
  az->add_option("--thresholds", an.thresholds, "spike thresholds")->delimiter(',');
  az->add_option("--lo", an.lo, "lower activity quantile (negative: library default)");
  az->add_option("--hi", an.hi, "upper activity quantile (negative: library default)");
  az->add_option("--bins", an.bins, "histogram bins (0: library default)");
  az->add_option("--top-fraction", an.top_fraction, "upstream fraction for the CP sign analysis (0: default)");
  az->add_option("--horizon", an.horizon, "class-node horizon in steps (0: default)");
  az->add_option("--bins-per-decade", an.bins_per_decade, "power-law log bins per decade (0: default)");
  az->add_option("--checkpoint,-c", an.checkpoint, "also check encoding clusters of this model");
  az->add_option("--cluster-per-class", an.cluster_per_class, "images per class for the cluster check");
  az->add_option("--reduce-dims", an.reduce_dims, "PCA components before KNN");
  az->add_option("--k", an.k, "KNN neighbours");
  az->add_option("--out,-o", an.out, "output directory");
  an.data.add(az, 0, 20, 1);

  int gc_instances = 50;
  std::uint64_t gc_seed = 1;
  bool gc_f32 = false;
  std::string gc_fault;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every primitive and the meta-gradient");
  gc->add_option("--instances", gc_instances, "random cases per primitive");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_flag("--f32", gc_f32, "emulate single precision with relaxed thresholds");
  gc->add_option("--fault", gc_fault, "corrupt one primitive's backward pass");
  gc->add_option("--out,-o", gc_out, "write the report as JSON");

  auto* dsc = app.add_subcommand("dataset", "dataset utilities");
  dsc->require_subcommand(1);
  DataOptions syn;
  std::string syn_out = "glyphs";
  auto* sy = dsc->add_subcommand("synthesize", "write a synthetic glyph dataset as PNG folders");
  syn.add(sy, 25, 20, 1);
  sy->add_option("--out,-o", syn_out, "output directory");
  DataOptions ins;
  int ins_probe = 0;
  auto* in = dsc->add_subcommand("inspect", "class counts, splits and an optional linear probe");
  ins.add(in, 0, 20, 1);
  in->add_option("--probe-train", ins_probe, "train a linear probe on this many images per class (0: skip)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*mt) return run_meta_train(meta);
    if (*tr) return run_transfer(xfer);
    if (*az) return run_analyze(an);
    if (*gc) return run_gradcheck(gc_instances, gc_seed, gc_f32, gc_fault, gc_out);
    if (*sy) {
      if (syn.classes == 0) usage_error("--classes must be positive");
      return run_synthesize(syn, syn_out);
    }
    if (*in) {
      if (ins.data.empty() && ins.classes == 0) ins.classes = 25;
      return run_inspect(ins, ins_probe);
    }
  } catch (const CliError& e) {
    std::fprintf(stderr, "tsar: %s\n", e.message.c_str());
    return e.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "tsar: %s\n", e.what());
    return 1;
  }
  return 0;
}
