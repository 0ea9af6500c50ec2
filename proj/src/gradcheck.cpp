#include "tsar/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tsar/error.hpp"
#include "tsar/ops.hpp"

namespace tsar {

const char* primitive_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kConv2d: return "conv2d";
    case PrimitiveKind::kMaxPool2d: return "maxpool2d";
    case PrimitiveKind::kInstanceNorm: return "instance_norm";
    case PrimitiveKind::kRelu: return "relu";
    case PrimitiveKind::kLinear: return "linear";
    case PrimitiveKind::kSigmoid: return "sigmoid";
    case PrimitiveKind::kElementwiseMul: return "elementwise_mul";
    case PrimitiveKind::kSoftmaxXent: return "softmax_xent";
  }
  return "unknown";
}

std::vector<PrimitiveKind> all_primitives() {
  return {PrimitiveKind::kConv2d,  PrimitiveKind::kMaxPool2d, PrimitiveKind::kInstanceNorm,
          PrimitiveKind::kRelu,    PrimitiveKind::kLinear,    PrimitiveKind::kSigmoid,
          PrimitiveKind::kElementwiseMul, PrimitiveKind::kSoftmaxXent};
}

Var primitive_forward(PrimitiveKind kind, std::span<const Var> in, const PrimitiveAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      fail(ErrorKind::kInvalidArgument, std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                                            " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case PrimitiveKind::kConv2d:
      need(2);
      return ops::conv2d(in[0], in[1]);
    case PrimitiveKind::kMaxPool2d:
      need(1);
      return ops::maxpool2d(in[0]);
    case PrimitiveKind::kInstanceNorm:
      need(1);
      return ops::instance_norm(in[0], attrs.eps);
    case PrimitiveKind::kRelu:
      need(1);
      return ops::relu(in[0]);
    case PrimitiveKind::kLinear:
      need(3);
      return ops::linear(in[0], in[1], in[2]);
    case PrimitiveKind::kSigmoid:
      need(1);
      return ops::sigmoid(in[0]);
    case PrimitiveKind::kElementwiseMul:
      need(2);
      return ops::mul(in[0], in[1]);
    case PrimitiveKind::kSoftmaxXent:
      need(1);
      return ops::softmax_xent(in[0], attrs.labels);
  }
  fail(ErrorKind::kInvalidArgument, "primitive_forward: unknown kind");
}

namespace {

double eval_loss(const TapeFn& fn, std::span<const Tensor> params) {
  Tape tape;
  NoGradGuard guard(tape);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, false));
  Var loss = fn(tape, leaves);
  return loss.value().item();
}

}  // namespace

double grad_check(const TapeFn& fn, std::span<const Tensor> params, double eps) {
  if (!(eps > 0.0)) fail(ErrorKind::kInvalidArgument, "grad_check: eps must be positive");

  std::vector<Tensor> analytic;
  double base = 0.0;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
    Var loss = fn(tape, leaves);
    base = loss.value().item();
    auto res = grad(loss, leaves);
    for (const auto& g : res.grads) analytic.push_back(g.value());
  }
  const double again = eval_loss(fn, params);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    fail(ErrorKind::kNumeric, "grad_check: function is not deterministic (two forward passes disagree)");
  }

  std::vector<Tensor> work(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::int64_t i = 0; i < work[p].numel(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + eps;
      const double up = eval_loss(fn, work);
      work[p][i] = orig - eps;
      const double down = eval_loss(fn, work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check_f32(const TapeFn& fn, std::span<const Tensor> params, double eps) {
  if (!(eps > 0.0)) fail(ErrorKind::kInvalidArgument, "grad_check: eps must be positive");
  std::vector<Tensor> work(params.begin(), params.end());
  for (Tensor& t : work)
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(t[i]);
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : work) leaves.push_back(tape.leaf(p, true));
    auto res = grad(fn(tape, leaves), leaves);
    for (const auto& g : res.grads) analytic.push_back(g.value());
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::int64_t i = 0; i < work[p].numel(); ++i) {
      const double orig = work[p][i];
      work[p][i] = static_cast<float>(orig + eps);
      const double h_up = work[p][i] - orig;
      const double up = static_cast<float>(eval_loss(fn, work));
      work[p][i] = static_cast<float>(orig - eps);
      const double h_down = orig - work[p][i];
      const double down = static_cast<float>(eval_loss(fn, work));
      work[p][i] = orig;
      const double numeric = (up - down) / (h_up + h_down);
      worst = std::max(worst, std::abs(static_cast<float>(analytic[p][i]) - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Reduce an output against fixed weights so every element gets a distinct
// upstream gradient.
Var project(Var out, const Tensor& weights) { return ops::sum(ops::mul_const(out, weights)); }

}  // namespace

GradCase random_primitive_case(PrimitiveKind kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> small(2, 4);
  GradCase c{kind, {}, {}};
  switch (kind) {
    case PrimitiveKind::kConv2d: {
      const std::int64_t n = small(rng) - 1, ci = small(rng), co = small(rng), h = 4 + small(rng), w = 4 + small(rng);
      c.params = {uniform({n, ci, h, w}, rng), uniform({co, ci, 3, 3}, rng)};
      Tensor r = uniform({n, co, h - 2, w - 2}, rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::conv2d(p[0], p[1]), r); };
      break;
    }
    case PrimitiveKind::kMaxPool2d: {
      const std::int64_t ch = small(rng), h = 2 * small(rng) + 1, w = 2 * small(rng);
      Tensor x({1, ch, h, w});
      // Distinct values on a 0.05 grid: no window ever ties within eps.
      std::vector<double> grid(static_cast<std::size_t>(x.numel()));
      for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = 0.05 * static_cast<double>(i);
      std::shuffle(grid.begin(), grid.end(), rng);
      for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = grid[static_cast<std::size_t>(i)];
      c.params = {std::move(x)};
      Tensor r = uniform({1, ch, h / 2, w / 2}, rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::maxpool2d(p[0]), r); };
      break;
    }
    case PrimitiveKind::kInstanceNorm: {
      const std::int64_t n = small(rng) - 1, ch = small(rng), h = small(rng) + 1, w = small(rng) + 1;
      c.params = {uniform({n, ch, h, w}, rng)};
      Tensor r = uniform({n, ch, h, w}, rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::instance_norm(p[0]), r); };
      break;
    }
    case PrimitiveKind::kRelu: {
      Tensor x = uniform({small(rng), small(rng) + 3}, rng);
      for (auto& v : x.data()) v = v >= 0 ? v + 0.05 : v - 0.05;
      Tensor r = uniform(x.shape(), rng);
      c.params = {std::move(x)};
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::relu(p[0]), r); };
      break;
    }
    case PrimitiveKind::kLinear: {
      const std::int64_t n = small(rng), in = small(rng) + 2, out = small(rng);
      c.params = {uniform({n, in}, rng), uniform({out, in}, rng), uniform({out}, rng)};
      Tensor r = uniform({n, out}, rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::linear(p[0], p[1], p[2]), r); };
      break;
    }
    case PrimitiveKind::kSigmoid: {
      c.params = {uniform({small(rng), small(rng) + 2}, rng, -4.0, 4.0)};
      Tensor r = uniform(c.params[0].shape(), rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::sigmoid(p[0]), r); };
      break;
    }
    case PrimitiveKind::kElementwiseMul: {
      const Shape s{small(rng), small(rng) + 1};
      c.params = {uniform(s, rng), uniform(s, rng)};
      Tensor r = uniform(s, rng);
      c.fn = [r](Tape&, std::span<const Var> p) { return project(ops::mul(p[0], p[1]), r); };
      break;
    }
    case PrimitiveKind::kSoftmaxXent: {
      const std::int64_t n = small(rng), k = small(rng) + 1;
      c.params = {uniform({n, k}, rng, -3.0, 3.0)};
      std::vector<int> labels(static_cast<std::size_t>(n));
      std::uniform_int_distribution<int> lab(0, static_cast<int>(k) - 1);
      for (auto& l : labels) l = lab(rng);
      c.fn = [labels](Tape&, std::span<const Var> p) { return ops::softmax_xent(p[0], labels); };
      break;
    }
  }
  return c;
}

}  // namespace tsar
