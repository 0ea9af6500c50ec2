#include "tsar/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "tsar/error.hpp"
#include "tsar/ops.hpp"

namespace tsar {

const std::array<const char*, TsarModel::kNumGoverned> TsarModel::kLayerNames = {"C1", "C2", "C3", "CP"};

namespace {

constexpr int kStages = 3;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

Tensor uniform_init(Shape shape, std::int64_t fan_in, double scale, std::mt19937_64& rng) {
  const double bound = scale * std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

std::string clf_conv(int s) { return "clf.conv" + std::to_string(s + 1); }
std::string reg_conv(int s) { return "reg.conv" + std::to_string(s + 1) + ".w"; }
std::string reg_out(const std::string& layer) { return "reg.out." + layer; }

bool anml(const ModelConfig& c) { return c.variant == Variant::kAnmlStyle; }

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kTsar: return "tsar";
    case Variant::kAnmlStyle: return "anml_style";
    case Variant::kOmlStyle: return "oml_style";
    case Variant::kScratch: return "scratch";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  const std::string n = lower(name);
  if (n == "tsar") return Variant::kTsar;
  if (n == "anml_style" || n == "anml") return Variant::kAnmlStyle;
  if (n == "oml_style" || n == "oml") return Variant::kOmlStyle;
  if (n == "scratch") return Variant::kScratch;
  fail(ErrorKind::kConfig, "unknown model variant '" + name + "' (tsar, anml_style, oml_style, scratch)");
}

ModelConfig preset_config(const std::string& name, Variant variant, std::int64_t num_classes) {
  ModelConfig c;
  c.variant = variant;
  c.classifier.num_classes = num_classes;
  if (name == "tiny") {
    c.regulator.conv_channels = 24;
    c.classifier.conv_channels = 16;
    c.classifier.hidden = 64;
  } else if (name == "paper") {
    c.regulator.conv_channels = 192;
    c.classifier.conv_channels = variant == Variant::kAnmlStyle ? 256 : 112;
    c.classifier.hidden = 256;
  } else {
    fail(ErrorKind::kConfig, "unknown preset '" + name + "' (tiny, paper)");
  }
  return c;
}

double BiasMode::initial_bias() const {
  switch (kind) {
    case Kind::kGrow: return -8.0;
    case Kind::kSculpt: return 0.0;
    case Kind::kCustom: return custom;
  }
  return 0.0;
}

double BiasMode::transfer_cp_bias() const { return initial_bias() / 4.0; }

std::string BiasMode::str() const {
  switch (kind) {
    case Kind::kGrow: return "grow";
    case Kind::kSculpt: return "sculpt";
    case Kind::kCustom: {
      std::ostringstream os;
      os << "custom(" << custom << ")";
      return os.str();
    }
  }
  return "?";
}

BiasMode BiasMode::parse(const std::string& s) {
  const std::string n = lower(s);
  if (n == "grow") return grow();
  if (n == "sculpt") return sculpt();
  std::string num;
  bool custom = false;
  if (n.rfind("custom(", 0) == 0 && n.back() == ')') {
    num = n.substr(7, n.size() - 8);
    custom = true;
  } else if (n.rfind("custom_bias=", 0) == 0) {
    num = n.substr(12);
    custom = true;
  }
  if (custom) {
    try {
      std::size_t used = 0;
      const double b = std::stod(num, &used);
      if (used == num.size() && std::isfinite(b)) return custom_bias(b);
    } catch (const std::exception&) {
    }
  }
  fail(ErrorKind::kConfig, "unknown bias mode '" + s + "' (grow, sculpt, custom_bias=<b>)");
}

std::string RunMode::str() const {
  switch (variant) {
    case Variant::kTsar: {
      if (bias.kind != BiasMode::Kind::kCustom) return bias.str();
      std::ostringstream os;
      os << "custom_bias=" << bias.custom;
      return os.str();
    }
    case Variant::kAnmlStyle: return "anml";
    case Variant::kOmlStyle: return "oml";
    case Variant::kScratch: return "scratch";
  }
  return "?";
}

RunMode RunMode::parse(const std::string& s) {
  const std::string n = lower(s);
  if (n == "anml") return {Variant::kAnmlStyle, BiasMode::sculpt()};
  if (n == "oml") return {Variant::kOmlStyle, BiasMode::grow()};
  if (n == "scratch") return {Variant::kScratch, BiasMode::grow()};
  try {
    return {Variant::kTsar, BiasMode::parse(n)};
  } catch (const Error&) {
    fail(ErrorKind::kConfig, "unknown mode '" + s + "' (grow, sculpt, custom_bias=<b>, anml, oml, scratch)");
  }
}

const char* treatment_name(Treatment t) {
  switch (t) {
    case Treatment::kNormal: return "normal";
    case Treatment::kEnhancing: return "enhancing";
    case Treatment::kDiminishing: return "diminishing";
    case Treatment::kMixed: return "mixed";
    case Treatment::kFixed: return "fixed";
    case Treatment::kReservoir: return "reservoir";
  }
  return "?";
}

Treatment parse_treatment(const std::string& s) {
  const std::string n = lower(s);
  for (Treatment t : {Treatment::kNormal, Treatment::kEnhancing, Treatment::kDiminishing, Treatment::kMixed,
                      Treatment::kFixed, Treatment::kReservoir}) {
    if (n == treatment_name(t)) return t;
  }
  fail(ErrorKind::kConfig, "unknown treatment '" + s + "'");
}

double GateSet::mean() const {
  double s = 0.0;
  std::int64_t n = 0;
  for (const Tensor& g : gates) {
    for (double v : g.data()) s += v;
    n += g.numel();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

double GateSet::min() const {
  double m = std::numeric_limits<double>::infinity();
  for (const Tensor& g : gates)
    for (double v : g.data()) m = std::min(m, v);
  return m;
}

double GateSet::max() const {
  double m = -std::numeric_limits<double>::infinity();
  for (const Tensor& g : gates)
    for (double v : g.data()) m = std::max(m, v);
  return m;
}

StageDims stage_dims(const ModelConfig& config) {
  const ClassifierConfig& c = config.classifier;
  if (c.in.channels < 1 || c.in.height < 1 || c.in.width < 1) {
    fail(ErrorKind::kConfig, "input shape must be positive, got (" + std::to_string(c.in.channels) + "," +
                                 std::to_string(c.in.height) + "," + std::to_string(c.in.width) + ")");
  }
  if (c.in.height != c.in.width) fail(ErrorKind::kConfig, "input must be square");
  if (c.kernel < 1) fail(ErrorKind::kConfig, "kernel must be positive");
  auto run = [&](const char* net, bool pool_last) {
    std::vector<std::int64_t> out;
    std::int64_t h = c.in.height;
    for (int s = 0; s < kStages; ++s) {
      const std::string stage = std::string(net) + " stage " + std::to_string(s + 1);
      h = h - c.kernel + 1;
      if (h < 1) fail(ErrorKind::kShape, stage + ": spatial size " + std::to_string(h) + " after conv");
      if (s < kStages - 1 || pool_last) {
        h /= 2;
        if (h < 1) fail(ErrorKind::kShape, stage + ": spatial size 0 after pool");
      }
      out.push_back(h);
    }
    return out;
  };
  StageDims d;
  if (config.variant == Variant::kTsar || config.variant == Variant::kAnmlStyle) {
    d.regulator = run("regulator", false);
    d.encoding_dim = config.regulator.conv_channels * d.regulator.back() * d.regulator.back();
  }
  d.classifier = run("classifier", !anml(config));
  d.cp_input_dim = c.conv_channels * d.classifier.back() * d.classifier.back();
  return d;
}

void TsarModel::add_param(std::string name, ParamGroup group, int layer, Tensor value) {
  params_.push_back(Parameter{std::move(name), group, layer, std::move(value), false});
}

TsarModel TsarModel::build(const ModelConfig& config, std::uint64_t seed) {
  const StageDims dims = stage_dims(config);
  const ClassifierConfig& c = config.classifier;
  if (c.num_classes < 2) fail(ErrorKind::kConfig, "num_classes must be >= 2");
  if (c.conv_channels < 1) fail(ErrorKind::kConfig, "classifier conv_channels must be positive");

  TsarModel m;
  m.config_ = config;
  std::mt19937_64 rng(seed);
  const std::int64_t k = c.kernel;

  m.cp_in_ = dims.cp_input_dim;

  if (m.has_regulator()) {
    const std::int64_t rc = config.regulator.conv_channels;
    if (rc < 1) fail(ErrorKind::kConfig, "regulator conv_channels must be positive");
    m.config_.regulator.encoding_dim = dims.encoding_dim;
    std::int64_t in_ch = c.in.channels;
    for (int s = 0; s < kStages; ++s) {
      m.add_param(reg_conv(s), ParamGroup::kRegulatorConv, -1,
                  uniform_init(Shape{rc, in_ch, k, k}, in_ch * k * k, 1.0, rng));
      in_ch = rc;
    }
  } else {
    m.config_.regulator.encoding_dim = 0;
  }

  std::int64_t in_ch = c.in.channels;
  for (int s = 0; s < kStages; ++s) {
    m.add_param(clf_conv(s) + ".w", ParamGroup::kClassifierConv, -1,
                uniform_init(Shape{c.conv_channels, in_ch, k, k}, in_ch * k * k, 1.0, rng));
    m.add_param(clf_conv(s) + ".b", ParamGroup::kClassifierConv, -1, Tensor(Shape{c.conv_channels}));
    in_ch = c.conv_channels;
  }
  std::int64_t head_in = m.cp_in_;
  if (config.variant == Variant::kOmlStyle) {
    if (c.hidden < 1) fail(ErrorKind::kConfig, "hidden width must be positive");
    m.add_param("clf.hidden.w", ParamGroup::kClassifierHidden, -1,
                uniform_init(Shape{c.hidden, m.cp_in_}, m.cp_in_, 1.0, rng));
    m.add_param("clf.hidden.b", ParamGroup::kClassifierHidden, -1, Tensor(Shape{c.hidden}));
    head_in = c.hidden;
  }
  m.add_param("clf.cp.w", ParamGroup::kClassifierCP, -1, uniform_init(Shape{c.num_classes, head_in}, head_in, 1.0, rng));
  m.add_param("clf.cp.b", ParamGroup::kClassifierCP, -1, Tensor(Shape{c.num_classes}));

  if (m.has_regulator()) {
    const std::int64_t enc = m.config_.regulator.encoding_dim;
    const std::vector<Shape> shapes = m.gate_shapes();
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      const std::string layer = anml(config) ? "R" : kLayerNames[l];
      const std::int64_t rows = numel_of(shapes[l]);
      m.add_param(reg_out(layer) + ".w", ParamGroup::kRegulatorOut, static_cast<int>(l),
                  uniform_init(Shape{rows, enc}, enc, 0.1, rng));
      m.add_param(reg_out(layer) + ".b", ParamGroup::kRegulatorOut, static_cast<int>(l),
                  Tensor(Shape{rows}, config.regulator.output_bias_init));
    }
  }
  m.set_phase(Phase::kMetaOuter);
  return m;
}

TsarModel TsarModel::from_parameters(const ModelConfig& config, std::vector<Parameter> params) {
  TsarModel m = build(config, 0);
  if (params.size() != m.params_.size()) {
    fail(ErrorKind::kFormat, "parameter count " + std::to_string(params.size()) + " does not match model (" +
                                 std::to_string(m.params_.size()) + ")");
  }
  for (Parameter& p : params) {
    const int i = m.index_of(p.name);
    Parameter& dst = m.params_[static_cast<std::size_t>(i)];
    if (p.value.shape() != dst.value.shape()) {
      fail(ErrorKind::kFormat, "parameter " + p.name + ": shape " + shape_str(p.value.shape()) + ", expected " +
                                   shape_str(dst.value.shape()));
    }
    dst.value = std::move(p.value);
    dst.frozen = p.frozen;
  }
  return m;
}

std::int64_t TsarModel::parameter_count() const {
  std::int64_t n = 0;
  for (const Parameter& p : params_) n += p.value.numel();
  return n;
}

std::string TsarModel::parameter_report() const {
  std::ostringstream os;
  os << "variant " << variant_name(variant()) << ", encoding " << encoding_dim() << ", cp input " << cp_in_ << "\n";
  for (const Parameter& p : params_) {
    os << "  " << p.name << " " << shape_str(p.value.shape()) << " " << p.value.numel()
       << (p.frozen ? " frozen" : "") << "\n";
  }
  os << "  total " << parameter_count() << "\n";
  return os.str();
}

int TsarModel::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return static_cast<int>(i);
  fail(ErrorKind::kInvalidArgument, "no parameter named " + name);
}

std::vector<std::string> TsarModel::governed_weight_names() const {
  if (!has_regulator()) return {};
  if (anml(config_)) return {"clf.cp.input"};
  return {clf_conv(0) + ".w", clf_conv(1) + ".w", clf_conv(2) + ".w", "clf.cp.w"};
}

std::vector<Shape> TsarModel::gate_shapes() const {
  if (!has_regulator()) return {};
  if (anml(config_)) return {Shape{1, cp_in_}};
  std::vector<Shape> out;
  for (const std::string& n : governed_weight_names()) out.push_back(param(n).shape());
  return out;
}

void TsarModel::init_regulation_bias(const BiasMode& mode) {
  const double b = mode.initial_bias();
  config_.regulator.output_bias_init = b;
  for (Parameter& p : params_) {
    if (p.group == ParamGroup::kRegulatorOut && p.value.rank() == 1) std::fill(p.value.data().begin(), p.value.data().end(), b);
  }
}

void TsarModel::reset_for_transfer(std::int64_t new_num_classes, const BiasMode& mode, Treatment treatment,
                                   std::uint64_t seed) {
  if (new_num_classes < 1) {
    fail(ErrorKind::kInvalidArgument, "reset_for_transfer: new_num_classes must be >= 1, got " +
                                          std::to_string(new_num_classes));
  }
  std::mt19937_64 rng(seed);
  config_.classifier.num_classes = new_num_classes;
  Parameter& w = params_[static_cast<std::size_t>(index_of("clf.cp.w"))];
  const std::int64_t head_in = w.value.dim(1);
  w.value = uniform_init(Shape{new_num_classes, head_in}, head_in, 1.0, rng);
  params_[static_cast<std::size_t>(index_of("clf.cp.b"))].value = Tensor(Shape{new_num_classes});
  if (variant() == Variant::kTsar) {
    const std::int64_t enc = encoding_dim();
    const std::int64_t rows = new_num_classes * head_in;
    params_[static_cast<std::size_t>(index_of("reg.out.CP.w"))].value = uniform_init(Shape{rows, enc}, enc, 0.1, rng);
    params_[static_cast<std::size_t>(index_of("reg.out.CP.b"))].value = Tensor(Shape{rows}, mode.transfer_cp_bias());
  }
  set_phase(Phase::kTransfer, treatment);
}

void TsarModel::set_phase(Phase phase, Treatment treatment) {
  for (Parameter& p : params_) {
    bool frozen = false;
    switch (phase) {
      case Phase::kMetaInner:
        frozen = p.group == ParamGroup::kRegulatorConv || p.group == ParamGroup::kRegulatorOut ||
                 (variant() == Variant::kOmlStyle && p.group == ParamGroup::kClassifierConv);
        break;
      case Phase::kMetaOuter: frozen = false; break;
      case Phase::kTransfer:
        frozen = p.group == ParamGroup::kRegulatorConv ||
                 (variant() == Variant::kOmlStyle && p.group == ParamGroup::kClassifierConv) ||
                 (treatment == Treatment::kFixed && p.group == ParamGroup::kRegulatorOut && p.layer >= 0 &&
                  p.layer < 3 && variant() == Variant::kTsar);
        break;
      case Phase::kEval: frozen = true; break;
    }
    p.frozen = frozen;
  }
}

void TsarModel::check_image(const Shape& s) const {
  const Shape want = config_.classifier.in.batch_shape();
  if (s != want) fail(ErrorKind::kShape, "image shape " + shape_str(s) + " does not match model input " + shape_str(want));
}

std::vector<Var> TsarModel::bind(Tape& tape, bool differentiable) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const Parameter& p : params_) out.push_back(differentiable ? tape.leaf(p.value) : tape.constant(p.value));
  return out;
}

GateVars TsarModel::regulate(std::span<const Var> bound, Var image) const {
  if (!has_regulator()) fail(ErrorKind::kInvalidArgument, std::string(variant_name(variant())) + " has no regulator");
  check_image(image.shape());
  auto at = [&](const std::string& n) { return bound[static_cast<std::size_t>(index_of(n))]; };
  Var h = image;
  for (int s = 0; s < kStages; ++s) {
    h = ops::conv2d(h, at(reg_conv(s)));
    if (h.shape()[2] * h.shape()[3] > 1) h = ops::instance_norm(h);
    h = ops::relu(h);
    if (s < kStages - 1) h = ops::maxpool2d(h);
  }
  GateVars g;
  g.encoding = ops::reshape(h, Shape{1, encoding_dim()});
  const std::vector<Shape> shapes = gate_shapes();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const std::string layer = anml(config_) ? "R" : kLayerNames[l];
    Var pre = ops::linear(g.encoding, at(reg_out(layer) + ".w"), at(reg_out(layer) + ".b"));
    g.gates.push_back(ops::reshape(ops::sigmoid(pre), shapes[l]));
  }
  return g;
}

Var TsarModel::forward(std::span<const Var> bound, Var image, const GateVars* gates) const {
  check_image(image.shape());
  if (bound.size() != params_.size()) fail(ErrorKind::kInvalidArgument, "forward: parameter binding size mismatch");
  const std::vector<Shape> shapes = gate_shapes();
  if (gates) {
    if (gates->gates.size() != shapes.size()) {
      fail(ErrorKind::kShape, "gated_forward: " + std::to_string(gates->gates.size()) + " gate arrays for " +
                                  std::to_string(shapes.size()) + " governed layers");
    }
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      if (gates->gates[l].shape() != shapes[l]) {
        fail(ErrorKind::kShape, "gated_forward: gate " + std::to_string(l) + " shape " +
                                    shape_str(gates->gates[l].shape()) + " vs weight " + shape_str(shapes[l]));
      }
    }
  }
  const bool per_weight = gates && !anml(config_);
  auto at = [&](const std::string& n) { return bound[static_cast<std::size_t>(index_of(n))]; };
  Var h = image;
  for (int s = 0; s < kStages; ++s) {
    Var w = at(clf_conv(s) + ".w");
    if (per_weight) w = ops::mul(gates->gates[static_cast<std::size_t>(s)], w);
    h = ops::add_channel_bias(ops::conv2d(h, w), at(clf_conv(s) + ".b"));
    if (s < kStages - 1 || !anml(config_)) h = ops::maxpool2d(h);
    // Instance norm over a single position maps everything to zero.
    if (h.shape()[2] * h.shape()[3] > 1) h = ops::instance_norm(h);
    h = ops::relu(h);
  }
  Var flat = ops::reshape(h, Shape{1, cp_in_});
  if (gates && anml(config_)) flat = ops::mul(flat, gates->gates[0]);
  if (variant() == Variant::kOmlStyle) flat = ops::relu(ops::linear(flat, at("clf.hidden.w"), at("clf.hidden.b")));
  Var w = at("clf.cp.w");
  if (per_weight) w = ops::mul(gates->gates[3], w);
  return ops::linear(flat, w, at("clf.cp.b"));
}

Var TsarModel::logits(std::span<const Var> bound, Var image) const {
  if (!has_regulator()) return forward(bound, image, nullptr);
  GateVars g = regulate(bound, image);
  return forward(bound, image, &g);
}

std::pair<Tensor, GateSet> TsarModel::regulate(const Tensor& image) const {
  Tape tape;
  NoGradGuard guard(tape);
  const std::vector<Var> bound = bind(tape, false);
  GateVars g = regulate(bound, tape.constant(image));
  GateSet set;
  for (std::size_t l = 0; l < g.gates.size(); ++l) {
    set.layers.push_back(anml(config_) ? "R" : kLayerNames[l]);
    set.gates.push_back(g.gates[l].value());
  }
  return {g.encoding.value(), std::move(set)};
}

Tensor TsarModel::gated_forward(const Tensor& image, const GateSet& gates) const {
  Tape tape;
  NoGradGuard guard(tape);
  const std::vector<Var> bound = bind(tape, false);
  GateVars g;
  for (const Tensor& t : gates.gates) g.gates.push_back(tape.constant(t));
  return forward(bound, tape.constant(image), &g).value();
}

Tensor TsarModel::ungated_forward(const Tensor& image) const {
  Tape tape;
  NoGradGuard guard(tape);
  const std::vector<Var> bound = bind(tape, false);
  return forward(bound, tape.constant(image), nullptr).value();
}

Tensor TsarModel::predict(const Tensor& image) const {
  Tape tape;
  NoGradGuard guard(tape);
  const std::vector<Var> bound = bind(tape, false);
  return logits(bound, tape.constant(image)).value();
}

}  // namespace tsar
