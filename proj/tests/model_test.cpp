#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tsar/error.hpp"
#include "tsar/model.hpp"
#include "tsar/ops.hpp"

using namespace tsar;

namespace {

TsarModel tiny(Variant v = Variant::kTsar, std::int64_t classes = 5, std::uint64_t seed = 1) {
  return TsarModel::build(preset_config("tiny", v, classes), seed);
}

Tensor image(std::mt19937_64& rng) { return test::random_tensor(Shape{1, 3, 28, 28}, rng, 0.0, 1.0); }

void zero_regulatory_weights(TsarModel& m) {
  for (Parameter& p : m.params()) {
    if (p.group == ParamGroup::kRegulatorOut && p.value.rank() == 2) p.value = Tensor(p.value.shape());
  }
}

GateSet constant_gates(const TsarModel& m, double v) {
  GateSet g;
  for (const Shape& s : m.gate_shapes()) g.gates.emplace_back(s, v);
  return g;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto i = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
  return v[i];
}

double xent(const Tensor& logits, int label) {
  double m = logits[0];
  for (std::int64_t j = 1; j < logits.numel(); ++j) m = std::max(m, logits[j]);
  double s = 0.0;
  for (std::int64_t j = 0; j < logits.numel(); ++j) s += std::exp(logits[j] - m);
  return -(logits[label] - m - std::log(s));
}

}  // namespace

TEST_CASE("shape arithmetic for the large preset") {
  const StageDims d = stage_dims(preset_config("paper", Variant::kTsar, 963));
  CHECK(d.encoding_dim == 1728);
  CHECK(d.classifier == std::vector<std::int64_t>{13, 5, 1});
  CHECK(d.cp_input_dim == 112);
  CHECK(stage_dims(preset_config("paper", Variant::kAnmlStyle, 963)).cp_input_dim == 2304);
}

TEST_CASE("small inputs are rejected naming the collapsing stage") {
  ModelConfig c = preset_config("tiny", Variant::kTsar, 5);
  c.classifier.in = InShape{3, 14, 14};
  // 14 -> 12 -> 6 -> 4 -> 2 -> conv to 0
  try {
    TsarModel::build(c, 0);
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kShape);
    CHECK(std::string(e.what()).find("stage 3") != std::string::npos);
  }
  c.classifier.in = InShape{3, 22, 22};  // 22 -> 20 -> 10 -> 8 -> 4 -> 2 -> 1
  const TsarModel m = TsarModel::build(c, 0);
  CHECK(m.cp_input_dim() == 16);
  CHECK(m.encoding_dim() == 24 * 4);
}

TEST_CASE("one regulatory output row per governed weight") {
  const TsarModel m = tiny();
  CHECK(m.encoding_dim() == 216);
  CHECK(m.cp_input_dim() == 16);
  const auto names = m.governed_weight_names();
  REQUIRE(names.size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string layer = TsarModel::kLayerNames[l];
    const Tensor& w = m.param("reg.out." + layer + ".w");
    CHECK(w.dim(0) == m.param(names[l]).numel());
    CHECK(w.dim(1) == m.encoding_dim());
    CHECK(m.param("reg.out." + layer + ".b").numel() == w.dim(0));
  }
  CHECK(m.parameter_report().find("total") != std::string::npos);
}

TEST_CASE("bias modes set every regulatory bias") {
  TsarModel m = tiny();
  for (auto [mode, want] : {std::pair{BiasMode::grow(), -8.0}, std::pair{BiasMode::sculpt(), 0.0},
                            std::pair{BiasMode::custom_bias(-6.0), -6.0}}) {
    m.init_regulation_bias(mode);
    int seen = 0;
    for (const Parameter& p : m.params()) {
      if (p.group != ParamGroup::kRegulatorOut || p.value.rank() != 1) continue;
      ++seen;
      for (double v : p.value.data()) CHECK(v == want);
    }
    CHECK(seen == 4);
  }
  CHECK(BiasMode::parse("custom(-6)").initial_bias() == -6.0);
  CHECK_THROWS_AS(BiasMode::parse("medium"), Error);
}

TEST_CASE("zero regulatory weights leave only the bias") {
  std::mt19937_64 rng(3);
  TsarModel m = tiny();
  zero_regulatory_weights(m);
  m.init_regulation_bias(BiasMode::grow());
  const double floor = 1.0 / (1.0 + std::exp(8.0));
  CHECK(floor == doctest::Approx(3.3535e-4).epsilon(1e-4));
  auto [enc, gates] = m.regulate(image(rng));
  CHECK(enc.numel() == 216);
  for (const Tensor& g : gates.gates)
    for (double v : g.data()) CHECK(v == doctest::Approx(floor).epsilon(1e-12));

  m.init_regulation_bias(BiasMode::sculpt());
  auto [enc2, half] = m.regulate(image(rng));
  CHECK(half.min() == 0.5);
  CHECK(half.max() == 0.5);
}

TEST_CASE("gates stay inside (0,1) for random images") {
  std::mt19937_64 rng(5);
  for (BiasMode mode : {BiasMode::grow(), BiasMode::sculpt(), BiasMode::custom_bias(30.0)}) {
    TsarModel m = tiny();
    m.init_regulation_bias(mode);
    for (int i = 0; i < 8; ++i) {
      Tensor x = test::random_tensor(Shape{1, 3, 28, 28}, rng, -50.0, 50.0);
      auto [enc, g] = m.regulate(x);
      CHECK(g.min() > 0.0);
      CHECK(g.max() < 1.0);
    }
  }
}

TEST_CASE("initial gate statistics for grow and sculpt") {
  std::mt19937_64 rng(11);
  TsarModel grow = tiny(Variant::kTsar, 25, 2);
  grow.init_regulation_bias(BiasMode::grow());
  TsarModel sculpt = tiny(Variant::kTsar, 25, 2);
  sculpt.init_regulation_bias(BiasMode::sculpt());
  std::vector<double> gv;
  double sculpt_sum = 0.0;
  std::int64_t sculpt_n = 0;
  for (int i = 0; i < 64; ++i) {
    const Tensor x = image(rng);
    for (const Tensor& g : grow.regulate(x).second.gates) gv.insert(gv.end(), g.data().begin(), g.data().end());
    for (const Tensor& g : sculpt.regulate(x).second.gates) {
      for (double v : g.data()) sculpt_sum += v;
      sculpt_n += g.numel();
    }
  }
  double mean = 0.0;
  for (double v : gv) mean += v;
  mean /= static_cast<double>(gv.size());
  CHECK(mean < 1e-2);
  CHECK(percentile(gv, 0.99) < 0.05);
  const double sculpt_mean = sculpt_sum / static_cast<double>(sculpt_n);
  CHECK(sculpt_mean >= 0.4);
  CHECK(sculpt_mean <= 0.6);
}

TEST_CASE("identity and zero gate overrides") {
  std::mt19937_64 rng(7);
  TsarModel m = tiny();
  Tensor& cp_b = m.params()[static_cast<std::size_t>(m.index_of("clf.cp.b"))].value;
  cp_b = test::random_tensor(cp_b.shape(), rng);
  for (int s = 1; s <= 3; ++s) {
    Tensor& b = m.params()[static_cast<std::size_t>(m.index_of("clf.conv" + std::to_string(s) + ".b"))].value;
    b = test::random_tensor(b.shape(), rng);
  }
  const Tensor x = image(rng);
  CHECK(m.gated_forward(x, constant_gates(m, 1.0)) == m.ungated_forward(x));
  const Tensor zero = m.gated_forward(x, constant_gates(m, 0.0));
  REQUIRE(zero.numel() == cp_b.numel());
  for (std::int64_t j = 0; j < zero.numel(); ++j) CHECK(zero[j] == cp_b[j]);

  GateSet wrong = constant_gates(m, 1.0);
  wrong.gates.pop_back();
  CHECK_THROWS_AS(m.gated_forward(x, wrong), Error);
  CHECK_THROWS_AS(m.regulate(Tensor(Shape{1, 3, 27, 28})), Error);
}

TEST_CASE("weight gradient is the gate times the functional-weight gradient") {
  std::mt19937_64 rng(13);
  TsarModel m = tiny(Variant::kTsar, 4, 9);
  m.init_regulation_bias(BiasMode::sculpt());
  const Tensor x = image(rng);
  const int label = 2;
  const GateSet gates = m.regulate(x).second;

  Tape tape;
  const std::vector<Var> bound = m.bind(tape, true);
  Var img = tape.constant(x);
  const int labels[1] = {label};
  Var loss = ops::softmax_xent(m.logits(bound, img), labels);
  const auto names = m.governed_weight_names();
  std::vector<Var> targets;
  for (const std::string& n : names) targets.push_back(bound[static_cast<std::size_t>(m.index_of(n))]);
  const GradResult g = grad(loss, targets);

  // The same network with functional weights baked in and identity gates.
  TsarModel functional = m;
  for (std::size_t l = 0; l < names.size(); ++l) {
    Tensor& w = functional.params()[static_cast<std::size_t>(functional.index_of(names[l]))].value;
    for (std::int64_t j = 0; j < w.numel(); ++j) w[j] *= gates.gates[l][j];
  }
  const GateSet ones = constant_gates(m, 1.0);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t l = 0; l < names.size(); ++l) {
    const std::size_t pi = static_cast<std::size_t>(functional.index_of(names[l]));
    const std::int64_t n = functional.params()[pi].value.numel();
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    for (int t = 0; t < 12; ++t) {
      const std::int64_t j = pick(rng);
      double& w = functional.params()[pi].value[j];
      const double w0 = w;
      w = w0 + h;
      const double up = xent(functional.gated_forward(x, ones), label);
      w = w0 - h;
      const double down = xent(functional.gated_forward(x, ones), label);
      w = w0;
      const double fd = (up - down) / (2 * h);
      const double want = gates.gates[l][j] * fd;
      worst = std::max(worst, std::abs(g.grads[l].value()[j] - want) / std::max(1.0, std::abs(want)));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("transfer reset") {
  TsarModel m = tiny(Variant::kTsar, 25);
  m.init_regulation_bias(BiasMode::grow());
  const Tensor c1_out = m.param("reg.out.C1.w");
  m.reset_for_transfer(100, BiasMode::grow(), Treatment::kNormal, 4);
  CHECK(m.param("clf.cp.w").shape() == Shape{100, m.cp_input_dim()});
  CHECK(m.param("reg.out.CP.w").dim(0) == 100 * m.cp_input_dim());
  for (double v : m.param("reg.out.CP.b").data()) CHECK(v == -2.0);
  CHECK(m.param("reg.out.C1.w") == c1_out);
  for (const Parameter& p : m.params()) CHECK(p.frozen == (p.group == ParamGroup::kRegulatorConv));

  TsarModel s = tiny(Variant::kTsar, 25);
  s.init_regulation_bias(BiasMode::sculpt());
  s.reset_for_transfer(100, BiasMode::sculpt(), Treatment::kFixed, 4);
  for (double v : s.param("reg.out.CP.b").data()) CHECK(v == 0.0);
  for (const Parameter& p : s.params()) {
    const bool fixed_out = p.group == ParamGroup::kRegulatorOut && p.layer < 3;
    CHECK(p.frozen == (p.group == ParamGroup::kRegulatorConv || fixed_out));
  }
  CHECK_THROWS_AS(s.reset_for_transfer(0, BiasMode::sculpt(), Treatment::kNormal, 0), Error);
}

TEST_CASE("phase freeze flags") {
  TsarModel m = tiny();
  m.set_phase(Phase::kMetaInner);
  for (const Parameter& p : m.params()) {
    const bool reg = p.group == ParamGroup::kRegulatorConv || p.group == ParamGroup::kRegulatorOut;
    CHECK(p.frozen == reg);
  }
  m.set_phase(Phase::kMetaOuter);
  for (const Parameter& p : m.params()) CHECK_FALSE(p.frozen);
  m.set_phase(Phase::kEval);
  for (const Parameter& p : m.params()) CHECK(p.frozen);
}

TEST_CASE("variants") {
  std::mt19937_64 rng(17);
  const Tensor x = image(rng);

  const TsarModel anml = tiny(Variant::kAnmlStyle);
  REQUIRE(anml.gate_shapes().size() == 1);
  CHECK(numel_of(anml.gate_shapes()[0]) == anml.cp_input_dim());
  CHECK(anml.cp_input_dim() == 16 * 3 * 3);
  CHECK(anml.predict(x).numel() == 5);

  TsarModel oml = tiny(Variant::kOmlStyle);
  CHECK_FALSE(oml.has_regulator());
  CHECK(oml.gate_shapes().empty());
  CHECK(oml.predict(x).numel() == 5);
  oml.reset_for_transfer(20, BiasMode::grow(), Treatment::kNormal, 1);
  for (const Parameter& p : oml.params()) CHECK(p.frozen == (p.group == ParamGroup::kClassifierConv));
  CHECK(oml.param("clf.cp.w").dim(1) == 64);

  const TsarModel scratch = tiny(Variant::kScratch);
  CHECK_FALSE(scratch.has_regulator());
  CHECK(scratch.predict(x) == scratch.ungated_forward(x));
  for (const Parameter& p : scratch.params()) CHECK(p.name.rfind("clf.", 0) == 0);
}

TEST_CASE("rebuilding from parameters") {
  const TsarModel m = tiny();
  TsarModel copy = TsarModel::from_parameters(m.config(), m.params());
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(copy.params()[i].value == m.params()[i].value);
  std::vector<Parameter> bad = m.params();
  bad[0].value = Tensor(Shape{1});
  CHECK_THROWS_AS(TsarModel::from_parameters(m.config(), bad), Error);
}
