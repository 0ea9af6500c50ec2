#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsar/tape.hpp"

namespace tsar {

// The primitive layer kinds exposed for checking and direct use.
enum class PrimitiveKind {
  kConv2d,
  kMaxPool2d,
  kInstanceNorm,
  kRelu,
  kLinear,
  kSigmoid,
  kElementwiseMul,
  kSoftmaxXent,
};

const char* primitive_name(PrimitiveKind kind);
std::vector<PrimitiveKind> all_primitives();

struct PrimitiveAttrs {
  std::vector<int> labels;  // softmax_xent
  double eps = 1e-5;        // instance_norm
};

// Applies one primitive to its inputs:
//   conv2d(x, w), maxpool2d(x), instance_norm(x), relu(x), linear(x, w, b),
//   sigmoid(x), elementwise_mul(a, b), softmax_xent(logits).
Var primitive_forward(PrimitiveKind kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs = {});

// Builds a scalar loss on the given tape from leaves holding `params`.
using TapeFn = std::function<Var(Tape&, std::span<const Var>)>;

// Max over every parameter entry of
//   |analytic - central difference| / max(1, |central difference|).
// Throws if two forward passes at the same point disagree.
double grad_check(const TapeFn& fn, std::span<const Tensor> params, double eps = 1e-5);

// Same measure with the parameters and every loss value rounded to single
// precision, as a single-precision build would see them.
double grad_check_f32(const TapeFn& fn, std::span<const Tensor> params, double eps);

struct GradCase {
  PrimitiveKind kind;
  TapeFn fn;
  std::vector<Tensor> params;
};

// A randomized scalar-valued instance of one primitive: its output is reduced
// against fixed random weights. Inputs are kept away from relu and maxpool
// tie points so central differences stay on one linear piece.
GradCase random_primitive_case(PrimitiveKind kind, std::mt19937_64& rng);

}  // namespace tsar
