#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tsar/error.hpp"
#include "tsar/persist.hpp"

using namespace tsar;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

std::string trace_error_of(const std::string& text) {
  try {
    decode_trace(text);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

void reseal(std::vector<std::uint8_t>& b) {
  const std::uint64_t c = crc64(b.data(), b.size() - 8);
  for (int i = 0; i < 8; ++i) b[b.size() - 8 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(c >> (8 * i));
}

RegulationTrace random_trace(TraceDetail detail, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RegulationTrace t;
  t.detail = detail;
  t.layers = {TraceLayer{"C1", Shape{2, 3}, {1, 4}}, TraceLayer{"CP", Shape{3, 2}, {0, 2, 5}}};
  t.meta = {{"seed", seed}};
  for (int k = 0; k < steps; ++k) {
    TraceStep s{k * 2, k / 3, k % 5, k, {}, {}, {}};
    for (const TraceLayer& l : t.layers) {
      std::vector<double> g(static_cast<std::size_t>(l.size()));
      for (double& x : g) x = u(rng);
      s.summary.push_back(summarize(g));
      if (detail == TraceDetail::kFull) {
        s.gates.push_back(g);
      } else if (detail == TraceDetail::kTracked) {
        std::vector<double> v;
        for (std::int64_t id : l.tracked) v.push_back(g[static_cast<std::size_t>(id)]);
        s.gates.push_back(v);
      }
    }
    if (detail == TraceDetail::kFull) s.cp_weights = {u(rng) - 0.5, -1e-300, 3.0e10};
    t.steps.push_back(s);
  }
  return t;
}

}  // namespace

TEST_CASE("crc64 matches the ECMA-182 check value") {
  const char* s = "123456789";
  CHECK(crc64(s, 9) == 0x6C40DF5F0B497347ULL);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kTsar, 5), 11);
  m.init_regulation_bias(BiasMode::custom_bias(-3.25));
  m.set_phase(Phase::kTransfer, Treatment::kFixed);
  const nlohmann::json run{{"lr", 0.001}, {"seed", 11}};
  const std::vector<std::uint8_t> bytes = encode_checkpoint(m, run);
  const Checkpoint ck = decode_checkpoint(bytes);
  CHECK(ck.run_config == run);
  const TsarModel back = model_from_checkpoint(ck);
  REQUIRE(back.params().size() == m.params().size());
  for (const Parameter& p : m.params()) {
    const Parameter& q = back.params()[static_cast<std::size_t>(back.index_of(p.name))];
    CHECK(q.value == p.value);
    CHECK(q.group == p.group);
  }
  CHECK(encode_checkpoint(back, run) == bytes);

  const fs::path path = fs::temp_directory_path() / "tsar_persist_test.ck";
  save_checkpoint(path.string(), m, run);
  CHECK(read_file_bytes(path.string()) == bytes);
  fs::remove(path);
}

TEST_CASE("f32 payloads round to float") {
  TsarModel m = TsarModel::build(preset_config("tiny", Variant::kOmlStyle, 3), 2);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(m, {}, PayloadType::kF32));
  const TsarModel back = model_from_checkpoint(ck);
  for (const Parameter& p : m.params()) {
    const Tensor& q = back.param(p.name);
    for (std::int64_t i = 0; i < p.value.numel(); ++i) CHECK(q[i] == static_cast<double>(static_cast<float>(p.value[i])));
  }
}

TEST_CASE("corrupted checkpoints name the cause") {
  const TsarModel m = TsarModel::build(preset_config("tiny", Variant::kAnmlStyle, 3), 1);
  const std::vector<std::uint8_t> good = encode_checkpoint(m, {});

  std::vector<std::uint8_t> b = good;
  b.resize(b.size() / 2);
  CHECK(error_of(b).starts_with("checksum:"));

  b = good;
  b[b.size() / 2] ^= 0x40;
  CHECK(error_of(b).starts_with("checksum:"));

  b = good;
  b[0] = 'X';
  CHECK(error_of(b).starts_with("magic:"));

  b = good;
  put_u32(b, 4, kCheckpointVersion + 1);
  reseal(b);
  CHECK(error_of(b).starts_with("version:"));

  CHECK(error_of({}).starts_with("magic:"));
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/tsar.ck"), Error);
}

TEST_CASE("trace round trip is value-exact at every detail level") {
  for (TraceDetail d : {TraceDetail::kSummary, TraceDetail::kTracked, TraceDetail::kFull}) {
    const RegulationTrace t = random_trace(d, 7, 3);
    const RegulationTrace back = decode_trace(encode_trace(t));
    CHECK(back == t);
  }
  const RegulationTrace full = random_trace(TraceDetail::kFull, 4, 9);
  CHECK(full.gate(1, 5, 2) == full.steps[2].gates[1][5]);
  CHECK(full.synapses(0).size() == 6);
  const RegulationTrace tracked = random_trace(TraceDetail::kTracked, 4, 9);
  CHECK(tracked.gate(1, 2, 3) == tracked.steps[3].gates[1][1]);
  CHECK_THROWS_AS(tracked.gate(1, 1, 0), Error);
  CHECK(tracked.synapses(1) == std::vector<std::int64_t>{0, 2, 5});
}

TEST_CASE("summary trace of 3000 steps has 3001 lines") {
  const std::string text = encode_trace(random_trace(TraceDetail::kSummary, 3000, 5));
  CHECK(std::count(text.begin(), text.end(), '\n') == 3001);
}

TEST_CASE("malformed traces report the line") {
  const std::string tracked = encode_trace(random_trace(TraceDetail::kTracked, 3, 1));
  const std::string summary = encode_trace(random_trace(TraceDetail::kSummary, 3, 1));
  const std::string full = encode_trace(random_trace(TraceDetail::kFull, 3, 1));

  // A full-detail record spliced into a tracked trace.
  const auto nth_line = [](const std::string& s, int n) {
    std::size_t at = 0;
    for (int i = 0; i < n; ++i) at = s.find('\n', at) + 1;
    return s.substr(at, s.find('\n', at) - at + 1);
  };
  std::string mixed = tracked.substr(0, tracked.find('\n') + 1) + nth_line(tracked, 1) + nth_line(full, 2);
  std::string err = trace_error_of(mixed);
  CHECK(err.starts_with("trace line 3:"));
  CHECK(err.find("tracked detail needs") != std::string::npos);

  mixed = summary.substr(0, summary.find('\n') + 1) + nth_line(tracked, 1);
  CHECK(trace_error_of(mixed).starts_with("trace line 2:"));

  std::string reordered = summary.substr(0, summary.find('\n') + 1) + nth_line(summary, 2) + nth_line(summary, 1);
  CHECK(trace_error_of(reordered).starts_with("trace line 3:"));

  CHECK(trace_error_of("{\"type\":\"step\"}\n").starts_with("trace line 1:"));
  CHECK(trace_error_of(summary + "{not json\n").starts_with("trace line 5:"));
}
