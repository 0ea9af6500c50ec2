#pragma once

// Raw numeric kernels behind the tape ops. No shape validation here; callers
// check shapes first.

#include <cstdint>
#include <vector>

#include "tsar/tensor.hpp"

namespace tsar::kernels {

// x (N,C,H,W), w (O,C,KH,KW) -> (N,O,H-KH+1,W-KW+1)
Tensor conv2d(const Tensor& x, const Tensor& w);
// grad_out (N,O,OH,OW), w (O,C,KH,KW) -> (N,C,OH+KH-1,OW+KW-1)
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& input_shape);
// x (N,C,H,W), grad_out (N,O,OH,OW) -> (O,C,KH,KW), summed over N
Tensor conv2d_grad_weight(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape);

// 2x2/stride-2 maxpool; writes flat argmax indices into `indices`.
Tensor maxpool2d(const Tensor& x, std::vector<std::int64_t>& indices);

// C = op(A) op(B) for 2-D tensors.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);

// Fixed-order dot product with four partial sums.
double dot(const double* a, const double* b, std::int64_t n);

}  // namespace tsar::kernels
