#include "tsar/ops.hpp"

#include <algorithm>
#include <cmath>

#include "tsar/error.hpp"

namespace tsar::ops {
namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) fail(ErrorKind::kInvalidArgument, "operands live on different tapes");
  return *a.tape();
}

void check_finite(const Tape& tape, OpKind kind, std::initializer_list<const Tensor*> values) {
  if (!tape.strict()) return;
  for (const Tensor* t : values) {
    if (!t->all_finite()) fail(ErrorKind::kNumeric, std::string(op_name(kind)) + ": non-finite input");
  }
}

Var unary(OpKind kind, Var a, OpAttrs attrs = {}) {
  Tape& tape = *a.tape();
  check_finite(tape, kind, {&a.value()});
  const Tensor* ins[1] = {&a.value()};
  Tensor v = compute_op(kind, ins, attrs);
  return tape.push(kind, {a.id()}, std::move(attrs), std::move(v));
}

Var binary(OpKind kind, Var a, Var b, OpAttrs attrs = {}) {
  Tape& tape = same_tape(a, b);
  check_finite(tape, kind, {&a.value(), &b.value()});
  const Tensor* ins[2] = {&a.value(), &b.value()};
  Tensor v = compute_op(kind, ins, attrs);
  return tape.push(kind, {a.id(), b.id()}, std::move(attrs), std::move(v));
}

}  // namespace

Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }

Var mul_const(Var a, Tensor c) {
  OpAttrs at;
  at.constant = std::make_shared<const Tensor>(std::move(c));
  return unary(OpKind::kMulConst, a, std::move(at));
}

Var affine(Var a, double scale, double shift) {
  OpAttrs at;
  at.a = scale;
  at.b = shift;
  return unary(OpKind::kAffine, a, std::move(at));
}

Var neg(Var a) { return affine(a, -1.0, 0.0); }
Var exp(Var a) { return unary(OpKind::kExp, a); }
Var log(Var a) { return unary(OpKind::kLog, a); }

Var pow(Var a, double p) {
  OpAttrs at;
  at.a = p;
  return unary(OpKind::kPow, a, std::move(at));
}

Var relu(Var a) { return unary(OpKind::kRelu, a); }
Var sigmoid(Var a) { return unary(OpKind::kSigmoid, a); }

Var conv2d(Var x, Var w) { return binary(OpKind::kConv2d, x, w); }

Var conv2d_grad_input(Var grad_out, Var w, const Shape& input_shape) {
  OpAttrs at;
  at.shape = input_shape;
  return binary(OpKind::kConv2dGradInput, grad_out, w, std::move(at));
}

Var conv2d_grad_weight(Var x, Var grad_out, const Shape& weight_shape) {
  OpAttrs at;
  at.shape = weight_shape;
  return binary(OpKind::kConv2dGradWeight, x, grad_out, std::move(at));
}

Var maxpool2d(Var x) { return unary(OpKind::kMaxPool, x); }

Var pool_gather(Var x, std::shared_ptr<const std::vector<std::int64_t>> indices, const Shape& out_shape) {
  OpAttrs at;
  at.indices = std::move(indices);
  at.shape = out_shape;
  return unary(OpKind::kPoolGather, x, std::move(at));
}

Var pool_scatter(Var g, std::shared_ptr<const std::vector<std::int64_t>> indices, const Shape& in_shape) {
  OpAttrs at;
  at.indices = std::move(indices);
  at.shape = in_shape;
  return unary(OpKind::kPoolScatter, g, std::move(at));
}

Var matmul(Var a, Var b) { return binary(OpKind::kMatMul, a, b); }
Var transpose(Var a) { return unary(OpKind::kTranspose, a); }

Var reshape(Var a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return unary(OpKind::kReshape, a, std::move(at));
}

Var sum_middle(Var a, std::int64_t outer, std::int64_t middle, std::int64_t inner) {
  if (outer * middle * inner != a.value().numel()) {
    fail(ErrorKind::kShape, "sum_middle: cannot view " + shape_str(a.shape()) + " as (" + std::to_string(outer) +
                                "," + std::to_string(middle) + "," + std::to_string(inner) + ")");
  }
  OpAttrs at;
  at.outer = outer;
  at.inner = inner;
  return unary(OpKind::kSumMiddle, a, std::move(at));
}

Var broadcast_middle(Var v, std::int64_t outer, std::int64_t inner, Shape shape) {
  OpAttrs at;
  at.outer = outer;
  at.inner = inner;
  at.shape = std::move(shape);
  return unary(OpKind::kBroadcastMiddle, v, std::move(at));
}

Var sum(Var a) { return reshape(sum_middle(a, 1, 1, a.value().numel()), Shape{}); }

Var mean(Var a) { return affine(sum(a), 1.0 / static_cast<double>(a.value().numel()), 0.0); }

Var instance_norm(Var x, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail(ErrorKind::kShape, "instance_norm: input must be NCHW, got " + shape_str(s));
  const std::int64_t groups = s[0] * s[1], hw = s[2] * s[3];
  const double inv_hw = 1.0 / static_cast<double>(hw);
  Var mu = affine(sum_middle(x, 1, groups, hw), inv_hw, 0.0);
  Var centered = sub(x, broadcast_middle(mu, 1, hw, s));
  Var var = affine(sum_middle(mul(centered, centered), 1, groups, hw), inv_hw, 0.0);
  Var inv_std = pow(affine(var, 1.0, eps), -0.5);
  return mul(centered, broadcast_middle(inv_std, 1, hw, s));
}

Var linear(Var x, Var w, Var b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1) {
    fail(ErrorKind::kShape, "linear: expected x (N,in), w (out,in), b (out); got " + shape_str(x.shape()) + ", " +
                                shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  if (x.shape()[1] != w.shape()[1] || w.shape()[0] != b.shape()[0]) {
    fail(ErrorKind::kShape, "linear: dims disagree: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                                ", b " + shape_str(b.shape()));
  }
  OpAttrs at;
  at.b = 1.0;  // x w^T
  Var xw = binary(OpKind::kMatMul, x, w, std::move(at));
  const std::int64_t n = x.shape()[0];
  return add(xw, broadcast_middle(b, n, 1, xw.shape()));
}

Var add_channel_bias(Var x, Var b) {
  const Shape& s = x.shape();
  if (s.size() != 4 || b.shape().size() != 1 || b.shape()[0] != s[1]) {
    fail(ErrorKind::kShape, "add_channel_bias: input " + shape_str(s) + " vs bias " + shape_str(b.shape()));
  }
  return add(x, broadcast_middle(b, s[0], s[2] * s[3], s));
}

Var softmax_xent(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) fail(ErrorKind::kShape, "softmax_xent: logits must be (N,K), got " + shape_str(s));
  const std::int64_t n = s[0], k = s[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    fail(ErrorKind::kShape, "softmax_xent: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                                " rows");
  }
  Tape& tape = *logits.tape();
  const Tensor& z = logits.value();
  Tensor row_max(Shape{n});
  Tensor onehot(s);
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      fail(ErrorKind::kInvalidArgument, "softmax_xent: label " + std::to_string(y) + " outside [0," +
                                            std::to_string(k) + ")");
    }
    double m = z[i * k];
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, z[i * k + j]);
    row_max[i] = m;
    onehot[i * k + y] = 1.0;
  }
  // The max shift is a constant: it cancels in the gradient.
  Var shifted = sub(logits, broadcast_middle(tape.constant(std::move(row_max)), 1, k, s));
  Var lse = log(sum_middle(exp(shifted), 1, n, k));
  Var log_probs = sub(shifted, broadcast_middle(lse, 1, k, s));
  return affine(sum(mul_const(log_probs, std::move(onehot))), -1.0 / static_cast<double>(n), 0.0);
}

}  // namespace tsar::ops
