#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "tsar/tape.hpp"

namespace tsar::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var mul_const(Var a, Tensor c);
Var affine(Var a, double scale, double shift);  // scale * a + shift
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var pow(Var a, double p);
Var relu(Var a);
Var sigmoid(Var a);

// x: NCHW, w: OIHW; stride 1, no padding.
Var conv2d(Var x, Var w);
Var conv2d_grad_input(Var grad_out, Var w, const Shape& input_shape);
Var conv2d_grad_weight(Var x, Var grad_out, const Shape& weight_shape);

// 2x2 window, stride 2, floor on odd sizes. Ties go to the first element in
// row-major window order.
Var maxpool2d(Var x);
Var pool_gather(Var x, std::shared_ptr<const std::vector<std::int64_t>> indices, const Shape& out_shape);
Var pool_scatter(Var g, std::shared_ptr<const std::vector<std::int64_t>> indices, const Shape& in_shape);

Var matmul(Var a, Var b);  // (m,k) x (k,n)
Var transpose(Var a);      // 2-D
Var reshape(Var a, Shape shape);

// View data as (outer, middle, inner) and sum away outer and inner.
Var sum_middle(Var a, std::int64_t outer, std::int64_t middle, std::int64_t inner);
// Inverse layout of sum_middle: repeat a (middle) vector to `shape`.
Var broadcast_middle(Var v, std::int64_t outer, std::int64_t inner, Shape shape);

Var sum(Var a);
Var mean(Var a);

// Composite layers.
Var instance_norm(Var x, double eps = 1e-5);
Var linear(Var x, Var w, Var b);  // x (N,in), w (out,in), b (out)
Var add_channel_bias(Var x, Var b);  // x NCHW, b (C)
Var softmax_xent(Var logits, std::span<const int> labels);  // mean cross-entropy

}  // namespace tsar::ops
