#include "kernels.hpp"

#include <cstring>

namespace tsar::kernels {
namespace {

// col[(c*KH + kh)*KW + kw][oh*OW + ow] = x[c][oh+kh][ow+kw]
void im2col(const double* x, std::int64_t c_n, std::int64_t h, std::int64_t w, std::int64_t kh_n,
            std::int64_t kw_n, double* col) {
  const std::int64_t oh_n = h - kh_n + 1;
  const std::int64_t ow_n = w - kw_n + 1;
  for (std::int64_t c = 0; c < c_n; ++c) {
    for (std::int64_t kh = 0; kh < kh_n; ++kh) {
      for (std::int64_t kw = 0; kw < kw_n; ++kw) {
        double* dst = col + ((c * kh_n + kh) * kw_n + kw) * oh_n * ow_n;
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          const double* src = x + (c * h + oh + kh) * w + kw;
          std::memcpy(dst + oh * ow_n, src, sizeof(double) * static_cast<std::size_t>(ow_n));
        }
      }
    }
  }
}

void col2im_add(const double* col, std::int64_t c_n, std::int64_t h, std::int64_t w, std::int64_t kh_n,
                std::int64_t kw_n, double* x) {
  const std::int64_t oh_n = h - kh_n + 1;
  const std::int64_t ow_n = w - kw_n + 1;
  for (std::int64_t c = 0; c < c_n; ++c) {
    for (std::int64_t kh = 0; kh < kh_n; ++kh) {
      for (std::int64_t kw = 0; kw < kw_n; ++kw) {
        const double* src = col + ((c * kh_n + kh) * kw_n + kw) * oh_n * ow_n;
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          double* dst = x + (c * h + oh + kh) * w + kw;
          const double* s = src + oh * ow_n;
          for (std::int64_t ow = 0; ow < ow_n; ++ow) dst[ow] += s[ow];
        }
      }
    }
  }
}

std::vector<double>& scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace

double dot(const double* a, const double* b, std::int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

Tensor conv2d(const Tensor& x, const Tensor& w) {
  const std::int64_t n_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t o_n = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t oh = h - kh + 1, ow = wd - kw + 1;
  const std::int64_t k_n = c_n * kh * kw, p_n = oh * ow;
  Tensor out(Shape{n_n, o_n, oh, ow});
  auto& col = scratch(static_cast<std::size_t>(k_n * p_n));
  for (std::int64_t n = 0; n < n_n; ++n) {
    im2col(x.ptr() + n * c_n * h * wd, c_n, h, wd, kh, kw, col.data());
    for (std::int64_t o = 0; o < o_n; ++o) {
      double* orow = out.ptr() + (n * o_n + o) * p_n;
      const double* wrow = w.ptr() + o * k_n;
      // k ascending per output element: matches a naive window sum exactly.
      for (std::int64_t k = 0; k < k_n; ++k) {
        const double wv = wrow[k];
        const double* crow = col.data() + k * p_n;
        for (std::int64_t p = 0; p < p_n; ++p) orow[p] += wv * crow[p];
      }
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& input_shape) {
  const std::int64_t n_n = input_shape[0], c_n = input_shape[1], h = input_shape[2], wd = input_shape[3];
  const std::int64_t o_n = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t oh = h - kh + 1, ow = wd - kw + 1;
  const std::int64_t k_n = c_n * kh * kw, p_n = oh * ow;
  Tensor dx(input_shape);
  auto& col = scratch(static_cast<std::size_t>(k_n * p_n));
  for (std::int64_t n = 0; n < n_n; ++n) {
    std::fill(col.begin(), col.begin() + k_n * p_n, 0.0);
    for (std::int64_t o = 0; o < o_n; ++o) {
      const double* g = grad_out.ptr() + (n * o_n + o) * p_n;
      const double* wrow = w.ptr() + o * k_n;
      for (std::int64_t k = 0; k < k_n; ++k) {
        const double wv = wrow[k];
        double* crow = col.data() + k * p_n;
        for (std::int64_t p = 0; p < p_n; ++p) crow[p] += wv * g[p];
      }
    }
    col2im_add(col.data(), c_n, h, wd, kh, kw, dx.ptr() + n * c_n * h * wd);
  }
  return dx;
}

Tensor conv2d_grad_weight(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape) {
  const std::int64_t n_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t o_n = weight_shape[0], kh = weight_shape[2], kw = weight_shape[3];
  const std::int64_t oh = h - kh + 1, ow = wd - kw + 1;
  const std::int64_t k_n = c_n * kh * kw, p_n = oh * ow;
  Tensor dw(weight_shape);
  auto& col = scratch(static_cast<std::size_t>(k_n * p_n));
  for (std::int64_t n = 0; n < n_n; ++n) {
    im2col(x.ptr() + n * c_n * h * wd, c_n, h, wd, kh, kw, col.data());
    for (std::int64_t o = 0; o < o_n; ++o) {
      const double* g = grad_out.ptr() + (n * o_n + o) * p_n;
      double* drow = dw.ptr() + o * k_n;
      for (std::int64_t k = 0; k < k_n; ++k) drow[k] += dot(g, col.data() + k * p_n, p_n);
    }
  }
  return dw;
}

Tensor maxpool2d(const Tensor& x, std::vector<std::int64_t>& indices) {
  const std::int64_t n_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h / 2, ow = w / 2;
  Tensor out(Shape{n_n, c_n, oh, ow});
  indices.assign(static_cast<std::size_t>(out.numel()), 0);
  std::int64_t o = 0;
  for (std::int64_t nc = 0; nc < n_n * c_n; ++nc) {
    const std::int64_t base = nc * h * w;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j, ++o) {
        std::int64_t best = base + (2 * i) * w + 2 * j;
        for (std::int64_t di = 0; di < 2; ++di) {
          for (std::int64_t dj = 0; dj < 2; ++dj) {
            const std::int64_t idx = base + (2 * i + di) * w + 2 * j + dj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        out[o] = x[best];
        indices[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::int64_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
  const std::int64_t lda = a.dim(1), ldb = b.dim(1);
  Tensor c(Shape{m, n});
  double* cp = c.ptr();
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  if (!trans_a && trans_b && k >= 16) {
    // Rows of A against rows of B.
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) cp[i * n + j] = dot(ap + i * lda, bp + j * ldb, k);
    }
    return c;
  }
  if (!trans_a && !trans_b && n == 1) {
    std::vector<double> col(static_cast<std::size_t>(k));
    for (std::int64_t kk = 0; kk < k; ++kk) col[static_cast<std::size_t>(kk)] = bp[kk * ldb];
    for (std::int64_t i = 0; i < m; ++i) cp[i] = dot(ap + i * lda, col.data(), k);
    return c;
  }
  if (trans_a && !trans_b) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double* arow = ap + kk * lda;
      const double* brow = bp + kk * ldb;
      if (n == 1) {
        const double bv = brow[0];
        for (std::int64_t i = 0; i < m; ++i) cp[i] += arow[i] * bv;
        continue;
      }
      for (std::int64_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* crow = cp + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return c;
  }
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = cp + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = trans_a ? ap[kk * lda + i] : ap[i * lda + kk];
      if (trans_b) {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * bp[j * ldb + kk];
      } else {
        const double* brow = bp + kk * ldb;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return c;
}

}  // namespace tsar::kernels
