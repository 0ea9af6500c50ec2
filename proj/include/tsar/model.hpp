#pragma once

// Regulator + classifier networks. The regulator turns an image into an
// encoding and then into one sigmoid gate per classifier weight; the
// classifier runs with functional weights gate * weight.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsar/tape.hpp"

namespace tsar {

struct InShape {
  std::int64_t channels = 3;
  std::int64_t height = 28;
  std::int64_t width = 28;

  Shape batch_shape() const { return Shape{1, channels, height, width}; }
  std::int64_t numel() const { return channels * height * width; }
  bool operator==(const InShape&) const = default;
};

enum class Variant { kTsar, kAnmlStyle, kOmlStyle, kScratch };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ClassifierConfig {
  InShape in;
  std::int64_t conv_channels = 112;
  std::int64_t kernel = 3;
  std::int64_t num_classes = 2;
  std::int64_t hidden = 256;  // OML-style prediction head width
};

struct RegulatorConfig {
  std::int64_t conv_channels = 192;
  std::int64_t encoding_dim = 0;  // derived at build time
  double output_bias_init = 0.0;
};

struct ModelConfig {
  Variant variant = Variant::kTsar;
  ClassifierConfig classifier;
  RegulatorConfig regulator;
};

// Desk presets. "tiny": 24 regulator / 16 classifier channels on 3x28x28.
// "paper": 192 / 112 (256 classifier channels for the ANML-style variant).
ModelConfig preset_config(const std::string& name, Variant variant, std::int64_t num_classes);

// Regulation bias regimes applied to every regulatory output bias before
// meta-learning.
struct BiasMode {
  enum class Kind { kGrow, kSculpt, kCustom } kind = Kind::kGrow;
  double custom = 0.0;

  static BiasMode grow() { return {Kind::kGrow, 0.0}; }
  static BiasMode sculpt() { return {Kind::kSculpt, 0.0}; }
  static BiasMode custom_bias(double b) { return {Kind::kCustom, b}; }

  double initial_bias() const;
  // Bias given to the freshly reset class-prediction regulatory output at
  // transfer time: -2 for grow, 0 for sculpt, a quarter of the initial bias
  // for custom values (which reproduces both named regimes).
  double transfer_cp_bias() const;
  std::string str() const;
  static BiasMode parse(const std::string& s);
};

// Experiment mode: a TSAR bias regime or one of the comparison variants.
// The ANML-style variant starts from the standard zero bias.
struct RunMode {
  Variant variant = Variant::kTsar;
  BiasMode bias;

  std::string str() const;
  static RunMode parse(const std::string& s);
};

// Transfer-time treatments.
enum class Treatment { kNormal, kEnhancing, kDiminishing, kMixed, kFixed, kReservoir };
const char* treatment_name(Treatment t);
Treatment parse_treatment(const std::string& s);

enum class ParamGroup { kRegulatorConv, kRegulatorOut, kClassifierConv, kClassifierHidden, kClassifierCP };

enum class Phase { kMetaInner, kMetaOuter, kTransfer, kEval };

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kClassifierConv;
  int layer = -1;  // governed classifier layer for regulatory outputs
  Tensor value;
  bool frozen = false;
};

// Per-layer gates for one image; same element count as the governed
// weights. The ANML-style variant has a single activation gate vector.
struct GateSet {
  std::vector<std::string> layers;
  std::vector<Tensor> gates;

  double mean() const;
  double min() const;
  double max() const;
};

// Gates and encoding as tape variables, for differentiable use.
struct GateVars {
  Var encoding;
  std::vector<Var> gates;
};

class TsarModel {
 public:
  static constexpr int kNumGoverned = 4;  // C1, C2, C3, CP
  static const std::array<const char*, kNumGoverned> kLayerNames;

  static TsarModel build(const ModelConfig& config, std::uint64_t seed);
  // Rebuilds a model around stored parameters; shapes must match `config`.
  static TsarModel from_parameters(const ModelConfig& config, std::vector<Parameter> params);

  const ModelConfig& config() const noexcept { return config_; }
  Variant variant() const noexcept { return config_.variant; }
  bool has_regulator() const noexcept {
    return config_.variant == Variant::kTsar || config_.variant == Variant::kAnmlStyle;
  }
  std::int64_t encoding_dim() const noexcept { return config_.regulator.encoding_dim; }
  std::int64_t cp_input_dim() const noexcept { return cp_in_; }
  std::int64_t num_classes() const noexcept { return config_.classifier.num_classes; }
  std::int64_t parameter_count() const;
  std::string parameter_report() const;

  std::vector<Parameter>& params() noexcept { return params_; }
  const std::vector<Parameter>& params() const noexcept { return params_; }
  int index_of(const std::string& name) const;
  const Tensor& param(const std::string& name) const { return params_[static_cast<std::size_t>(index_of(name))].value; }

  // Names of governed classifier weights, in C1, C2, C3, CP order (only CP's
  // input vector for the ANML-style variant).
  std::vector<std::string> governed_weight_names() const;
  std::vector<Shape> gate_shapes() const;

  void init_regulation_bias(const BiasMode& mode);
  // Fresh class-prediction layer (and its regulatory output) for a new class
  // count, then transfer freeze flags.
  void reset_for_transfer(std::int64_t new_num_classes, const BiasMode& mode, Treatment treatment,
                          std::uint64_t seed);
  void set_phase(Phase phase, Treatment treatment = Treatment::kNormal);
  bool is_trainable(std::size_t i) const { return !params_[i].frozen; }

  // Differentiable pieces. `bound` holds one Var per parameter, in params()
  // order; `image` is (1,C,H,W).
  GateVars regulate(std::span<const Var> bound, Var image) const;
  Var forward(std::span<const Var> bound, Var image, const GateVars* gates) const;
  // regulate + forward; gates omitted for variants without a regulator.
  Var logits(std::span<const Var> bound, Var image) const;

  // Tensor-level helpers (no gradients).
  std::pair<Tensor, GateSet> regulate(const Tensor& image) const;
  Tensor gated_forward(const Tensor& image, const GateSet& gates) const;
  Tensor ungated_forward(const Tensor& image) const;
  Tensor predict(const Tensor& image) const;

  std::vector<Var> bind(Tape& tape, bool differentiable) const;

 private:
  ModelConfig config_;
  std::vector<Parameter> params_;
  std::int64_t cp_in_ = 0;

  void add_param(std::string name, ParamGroup group, int layer, Tensor value);
  void check_image(const Shape& s) const;
};

// Spatial size after each stage, validated; throws naming the stage that
// collapses.
struct StageDims {
  std::vector<std::int64_t> regulator;   // H after stage 1, 2, 3
  std::vector<std::int64_t> classifier;  // H after stage 1, 2, 3
  std::int64_t encoding_dim = 0;
  std::int64_t cp_input_dim = 0;
};
StageDims stage_dims(const ModelConfig& config);

}  // namespace tsar
