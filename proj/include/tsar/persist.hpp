#pragma once

// Checkpoints and regulation traces.
//
// Checkpoint layout (little-endian):
//   "TSAR" | u32 version | u64 n + n bytes JSON config
//   | u32 array count | per array, sorted by name:
//       u32 n + name | u32 rank | u64 dims[rank] | u8 dtype (0 f32, 1 f64)
//       | payload, row-major
//   | u64 CRC-64/ECMA-182 of every preceding byte

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsar/model.hpp"

namespace tsar {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class PayloadType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct Checkpoint {
  ModelConfig model;
  nlohmann::json run_config;  // resolved run configuration, echoed verbatim
  std::vector<Parameter> params;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::uint64_t crc64(const void* data, std::size_t n);

std::vector<std::uint8_t> encode_checkpoint(const TsarModel& model, const nlohmann::json& run_config,
                                            PayloadType dtype = PayloadType::kF64);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const TsarModel& model, const nlohmann::json& run_config,
                     PayloadType dtype = PayloadType::kF64);
Checkpoint load_checkpoint(const std::string& path);
TsarModel model_from_checkpoint(const Checkpoint& ck);

// Writes to a temporary sibling and renames over the target.
void write_file_atomic(const std::string& path, const std::string& contents);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

enum class TraceDetail { kSummary, kTracked, kFull };
const char* trace_detail_name(TraceDetail d);
TraceDetail parse_trace_detail(const std::string& s);

struct TraceLayer {
  std::string name;
  Shape shape;
  std::vector<std::int64_t> tracked;  // synapse ids recorded at tracked detail
  std::int64_t size() const { return numel_of(shape); }
};

struct LayerSummary {
  double mean = 0.0;
  std::array<double, 5> pct{};  // p1, p25, p50, p75, p99
  bool operator==(const LayerSummary&) const = default;
};

struct TraceStep {
  int step = 0;
  int task = 0;
  int label = 0;
  int image = 0;
  std::vector<LayerSummary> summary;       // one per layer
  std::vector<std::vector<double>> gates;  // per layer; tracked or full detail
  std::vector<double> cp_weights;          // class-prediction weights, full detail
  bool operator==(const TraceStep&) const = default;
};

struct RegulationTrace {
  int version = 1;
  TraceDetail detail = TraceDetail::kSummary;
  std::vector<TraceLayer> layers;
  std::vector<TraceStep> steps;
  nlohmann::json meta = nlohmann::json::object();

  int layer_index(const std::string& name) const;
  // Gate of synapse `i` (layer-local id) at step record `k`.
  double gate(int layer, std::int64_t i, std::size_t k) const;
  // Synapse ids available for per-synapse analysis in `layer`.
  std::vector<std::int64_t> synapses(int layer) const;
};

bool operator==(const TraceLayer& a, const TraceLayer& b);
bool operator==(const RegulationTrace& a, const RegulationTrace& b);

LayerSummary summarize(std::span<const double> gates);

std::string encode_trace(const RegulationTrace& t);
RegulationTrace decode_trace(const std::string& text);
void write_trace(const std::string& path, const RegulationTrace& t);
RegulationTrace read_trace(const std::string& path);

}  // namespace tsar
