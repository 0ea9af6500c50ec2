#include "tsar/persist.hpp"

#include <algorithm>
#include <bit>
#include <boost/crc.hpp>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tsar/error.hpp"

namespace tsar {
using nlohmann::json;

namespace {

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str32(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  void need(std::size_t n, const std::string& field) const {
    if (end_ - pos_ < n) fail(ErrorKind::kFormat, field + ": unexpected end of data");
  }
  template <typename T>
  T le(const std::string& field) {
    need(sizeof(T), field);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t end() const { return end_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t crc64(const void* data, std::size_t n) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0, 0, false, false> crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

json model_config_to_json(const ModelConfig& c) {
  return json{{"variant", variant_name(c.variant)},
              {"in_shape", {c.classifier.in.channels, c.classifier.in.height, c.classifier.in.width}},
              {"classifier_channels", c.classifier.conv_channels},
              {"kernel", c.classifier.kernel},
              {"num_classes", c.classifier.num_classes},
              {"hidden", c.classifier.hidden},
              {"regulator_channels", c.regulator.conv_channels},
              {"encoding_dim", c.regulator.encoding_dim},
              {"output_bias_init", c.regulator.output_bias_init}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.variant = parse_variant(j.at("variant").get<std::string>());
    const auto in = j.at("in_shape").get<std::vector<std::int64_t>>();
    if (in.size() != 3) fail(ErrorKind::kFormat, "config: in_shape must have 3 entries");
    c.classifier.in = InShape{in[0], in[1], in[2]};
    c.classifier.conv_channels = j.at("classifier_channels").get<std::int64_t>();
    c.classifier.kernel = j.at("kernel").get<std::int64_t>();
    c.classifier.num_classes = j.at("num_classes").get<std::int64_t>();
    c.classifier.hidden = j.at("hidden").get<std::int64_t>();
    c.regulator.conv_channels = j.at("regulator_channels").get<std::int64_t>();
    c.regulator.encoding_dim = j.at("encoding_dim").get<std::int64_t>();
    c.regulator.output_bias_init = j.at("output_bias_init").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("config: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const TsarModel& model, const json& run_config, PayloadType dtype) {
  Writer w;
  w.raw("TSAR", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = json{{"model", model_config_to_json(model.config())}, {"run", run_config}}.dump();
  w.le<std::uint64_t>(cfg.size());
  w.raw(cfg.data(), cfg.size());
  std::vector<const Parameter*> sorted;
  for (const Parameter& p : model.params()) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(), [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
  w.le<std::uint32_t>(static_cast<std::uint32_t>(sorted.size()));
  for (const Parameter* p : sorted) {
    w.str32(p->name);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p->value.rank()));
    for (std::int64_t d : p->value.shape()) w.le<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    for (double v : p->value.data()) {
      if (dtype == PayloadType::kF32) {
        w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  w.le<std::uint64_t>(crc64(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "TSAR", 4) != 0) {
    fail(ErrorKind::kFormat, "magic: not a checkpoint file");
  }
  {
    Reader head(bytes, bytes.size());
    head.str(4, "magic");
    const auto version = head.le<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
      fail(ErrorKind::kFormat, "version: unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                   std::to_string(kCheckpointVersion) + ")");
    }
  }
  if (bytes.size() < 16) fail(ErrorKind::kFormat, "checksum: file truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != crc64(bytes.data(), body)) fail(ErrorKind::kFormat, "checksum: mismatch (file corrupted or truncated)");

  Reader r(bytes, body);
  r.str(4, "magic");
  r.le<std::uint32_t>("version");
  const auto cfg_len = r.le<std::uint64_t>("config length");
  if (cfg_len > body) fail(ErrorKind::kFormat, "config length: exceeds file size");
  Checkpoint ck;
  json cfg;
  try {
    cfg = json::parse(r.str(static_cast<std::size_t>(cfg_len), "config"));
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("config: ") + e.what());
  }
  if (!cfg.contains("model")) fail(ErrorKind::kFormat, "config: missing model section");
  ck.model = model_config_from_json(cfg["model"]);
  ck.run_config = cfg.value("run", json::object());
  const auto count = r.le<std::uint32_t>("array count");
  std::string prev;
  for (std::uint32_t a = 0; a < count; ++a) {
    const std::string idx = "array " + std::to_string(a);
    const auto name_len = r.le<std::uint32_t>(idx + " name");
    Parameter p;
    p.name = r.str(name_len, idx + " name");
    if (a > 0 && !(prev < p.name)) fail(ErrorKind::kFormat, "array " + p.name + ": names not sorted");
    prev = p.name;
    const auto rank = r.le<std::uint32_t>("array " + p.name + " rank");
    if (rank > 8) fail(ErrorKind::kFormat, "array " + p.name + " rank: " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.le<std::uint64_t>("array " + p.name + " shape");
      if (dim > (1ULL << 40)) fail(ErrorKind::kFormat, "array " + p.name + " shape: implausible dimension");
      shape.push_back(static_cast<std::int64_t>(dim));
    }
    const auto dtype = r.le<std::uint8_t>("array " + p.name + " dtype");
    if (dtype > 1) fail(ErrorKind::kFormat, "array " + p.name + " dtype: unknown code " + std::to_string(dtype));
    const std::int64_t n = numel_of(shape);
    r.need(static_cast<std::size_t>(n) * (dtype == 0 ? 4 : 8), "array " + p.name + " payload");
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) {
      v = dtype == 0 ? static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>("payload")))
                     : std::bit_cast<double>(r.le<std::uint64_t>("payload"));
    }
    p.value = Tensor(std::move(shape), std::move(data));
    ck.params.push_back(std::move(p));
  }
  if (r.pos() != r.end()) fail(ErrorKind::kFormat, "payload: trailing bytes before checksum");
  return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::kIo, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) fail(ErrorKind::kIo, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::string& path, const TsarModel& model, const json& run_config, PayloadType dtype) {
  const std::vector<std::uint8_t> b = encode_checkpoint(model, run_config, dtype);
  write_file_atomic(path, std::string(b.begin(), b.end()));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

TsarModel model_from_checkpoint(const Checkpoint& ck) { return TsarModel::from_parameters(ck.model, ck.params); }

const char* trace_detail_name(TraceDetail d) {
  switch (d) {
    case TraceDetail::kSummary: return "summary";
    case TraceDetail::kTracked: return "tracked";
    case TraceDetail::kFull: return "full";
  }
  return "?";
}

TraceDetail parse_trace_detail(const std::string& s) {
  if (s == "summary") return TraceDetail::kSummary;
  if (s == "tracked") return TraceDetail::kTracked;
  if (s == "full") return TraceDetail::kFull;
  fail(ErrorKind::kConfig, "unknown trace detail '" + s + "' (summary, tracked, full)");
}

int RegulationTrace::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return static_cast<int>(i);
  fail(ErrorKind::kInvalidArgument, "trace has no layer " + name);
}

double RegulationTrace::gate(int layer, std::int64_t i, std::size_t k) const {
  const std::size_t l = static_cast<std::size_t>(layer);
  if (layer < 0 || l >= layers.size()) fail(ErrorKind::kInvalidArgument, "layer index out of range");
  const std::vector<double>& g = steps.at(k).gates.at(l);
  if (detail == TraceDetail::kFull) {
    if (i < 0 || i >= static_cast<std::int64_t>(g.size())) fail(ErrorKind::kInvalidArgument, "unknown synapse");
    return g[static_cast<std::size_t>(i)];
  }
  if (detail == TraceDetail::kSummary) fail(ErrorKind::kInvalidArgument, "summary traces hold no per-synapse gates");
  const auto& ids = layers[l].tracked;
  const auto it = std::lower_bound(ids.begin(), ids.end(), i);
  if (it == ids.end() || *it != i) fail(ErrorKind::kInvalidArgument, "synapse " + std::to_string(i) + " not tracked");
  return g[static_cast<std::size_t>(it - ids.begin())];
}

std::vector<std::int64_t> RegulationTrace::synapses(int layer) const {
  const TraceLayer& L = layers.at(static_cast<std::size_t>(layer));
  if (detail == TraceDetail::kSummary) return {};
  if (detail == TraceDetail::kTracked) return L.tracked;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(L.size()));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

bool operator==(const TraceLayer& a, const TraceLayer& b) {
  return a.name == b.name && a.shape == b.shape && a.tracked == b.tracked;
}

bool operator==(const RegulationTrace& a, const RegulationTrace& b) {
  return a.version == b.version && a.detail == b.detail && a.layers == b.layers && a.steps == b.steps && a.meta == b.meta;
}

LayerSummary summarize(std::span<const double> gates) {
  LayerSummary s;
  if (gates.empty()) return s;
  std::vector<double> v(gates.begin(), gates.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  const double qs[5] = {0.01, 0.25, 0.5, 0.75, 0.99};
  for (std::size_t i = 0; i < 5; ++i) {
    const double pos = qs[i] * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    s.pct[i] = v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  }
  return s;
}

std::string encode_trace(const RegulationTrace& t) {
  std::ostringstream os;
  json layers = json::array();
  for (const TraceLayer& l : t.layers) layers.push_back({{"name", l.name}, {"shape", l.shape}, {"tracked", l.tracked}});
  os << json{{"type", "header"}, {"version", t.version}, {"detail", trace_detail_name(t.detail)}, {"layers", layers},
             {"meta", t.meta}}
            .dump()
     << "\n";
  for (const TraceStep& s : t.steps) {
    json rec{{"step", s.step}, {"task", s.task}, {"label", s.label}, {"image", s.image}};
    json summ = json::array();
    for (const LayerSummary& ls : s.summary) {
      summ.push_back({ls.mean, ls.pct[0], ls.pct[1], ls.pct[2], ls.pct[3], ls.pct[4]});
    }
    rec["summary"] = std::move(summ);
    if (t.detail != TraceDetail::kSummary) rec["gates"] = s.gates;
    if (!s.cp_weights.empty()) rec["cp_w"] = s.cp_weights;
    os << rec.dump() << "\n";
  }
  return os.str();
}

RegulationTrace decode_trace(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  RegulationTrace t;
  int lineno = 0;
  auto bad = [&](const std::string& why) { fail(ErrorKind::kFormat, "trace line " + std::to_string(lineno) + ": " + why); };
  if (!std::getline(in, line)) fail(ErrorKind::kFormat, "trace line 1: missing header");
  lineno = 1;
  try {
    const json h = json::parse(line);
    if (h.value("type", "") != "header") bad("first record is not a header");
    t.version = h.at("version").get<int>();
    if (t.version != 1) bad("unsupported trace version " + std::to_string(t.version));
    t.detail = parse_trace_detail(h.at("detail").get<std::string>());
    for (const json& l : h.at("layers")) {
      TraceLayer L{l.at("name").get<std::string>(), l.at("shape").get<Shape>(), l.at("tracked").get<std::vector<std::int64_t>>()};
      if (!std::is_sorted(L.tracked.begin(), L.tracked.end())) bad("tracked ids of " + L.name + " not sorted");
      t.layers.push_back(std::move(L));
    }
    t.meta = h.value("meta", json::object());
  } catch (const json::exception& e) {
    bad(e.what());
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TraceStep s;
    try {
      const json r = json::parse(line);
      s.step = r.at("step").get<int>();
      s.task = r.at("task").get<int>();
      s.label = r.at("label").get<int>();
      s.image = r.at("image").get<int>();
      for (const json& a : r.at("summary")) {
        if (a.size() != 6) bad("summary entries need 6 values");
        s.summary.push_back(LayerSummary{a[0].get<double>(), {a[1].get<double>(), a[2].get<double>(), a[3].get<double>(),
                                                               a[4].get<double>(), a[5].get<double>()}});
      }
      if (s.summary.size() != t.layers.size()) bad("summary covers " + std::to_string(s.summary.size()) + " layers");
      const bool has_gates = r.contains("gates");
      if (t.detail == TraceDetail::kSummary && has_gates) bad("gates present in a summary-level trace");
      if (t.detail != TraceDetail::kSummary) {
        if (!has_gates) bad(std::string("gates missing in a ") + trace_detail_name(t.detail) + "-level trace");
        s.gates = r.at("gates").get<std::vector<std::vector<double>>>();
        if (s.gates.size() != t.layers.size()) bad("gates cover " + std::to_string(s.gates.size()) + " layers");
        for (std::size_t l = 0; l < t.layers.size(); ++l) {
          const std::size_t want = t.detail == TraceDetail::kFull ? static_cast<std::size_t>(t.layers[l].size())
                                                                  : t.layers[l].tracked.size();
          if (s.gates[l].size() != want) {
            bad("layer " + t.layers[l].name + " has " + std::to_string(s.gates[l].size()) + " gates, " +
                trace_detail_name(t.detail) + " detail needs " + std::to_string(want));
          }
        }
      }
      if (r.contains("cp_w")) s.cp_weights = r.at("cp_w").get<std::vector<double>>();
    } catch (const json::exception& e) {
      bad(e.what());
    }
    if (!t.steps.empty() && s.step <= t.steps.back().step) bad("steps not strictly increasing");
    t.steps.push_back(std::move(s));
  }
  return t;
}

void write_trace(const std::string& path, const RegulationTrace& t) { write_file_atomic(path, encode_trace(t)); }

RegulationTrace read_trace(const std::string& path) {
  const std::vector<std::uint8_t> b = read_file_bytes(path);
  return decode_trace(std::string(b.begin(), b.end()));
}

}  // namespace tsar
