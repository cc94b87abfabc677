#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "agmm/numeric/tensor.hpp"

namespace agmm {

struct ConvGeometry {
  std::size_t n, c, h, w;        // input
  std::size_t co, kh, kw;        // kernel
  std::size_t stride, padding;
  std::size_t ho, wo;            // output

  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

namespace detail {

template <class Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Valid output range [lo, hi) along one axis for kernel offset k: the
// outputs whose input coordinate o*stride + k - pad lands inside [0, n).
inline void valid_range(std::size_t n, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
  lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  const long top = long(n) + long(pad) - long(k);  // need o*stride < top
  hi = top <= 0 ? 0 : std::min(out, (std::size_t(top) + stride - 1) / stride);
  if (lo > hi) lo = hi;
}

// Unfolds one image into a [C*kh*kw, Ho*Wo] patch matrix.
template <class Real>
void im2col(const Real* img, const ConvGeometry& g, Real* col) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        Real* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        std::size_t y0, y1, x0, x1;
        valid_range(g.h, g.ho, ky, g.stride, g.padding, y0, y1);
        valid_range(g.w, g.wo, kx, g.stride, g.padding, x0, x1);
        std::fill(row, row + y0 * g.wo, Real(0));
        for (std::size_t oy = y0; oy < y1; ++oy) {
          Real* dst = row + oy * g.wo;
          const Real* src = img + (c * g.h + oy * g.stride + ky - g.padding) * g.w;
          std::fill(dst, dst + x0, Real(0));
          if (g.stride == 1) {
            std::copy(src + x0 + kx - g.padding, src + x1 + kx - g.padding, dst + x0);
          } else {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = src[ox * g.stride + kx - g.padding];
          }
          std::fill(dst + x1, dst + g.wo, Real(0));
        }
        std::fill(row + y1 * g.wo, row + P, Real(0));
      }
}

template <class Real>
void col2im_add(const Real* col, const ConvGeometry& g, Real* img) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const Real* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        std::size_t y0, y1, x0, x1;
        valid_range(g.h, g.ho, ky, g.stride, g.padding, y0, y1);
        valid_range(g.w, g.wo, kx, g.stride, g.padding, x0, x1);
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const Real* src = row + oy * g.wo;
          Real* dst = img + (c * g.h + oy * g.stride + ky - g.padding) * g.w;
          for (std::size_t ox = x0; ox < x1; ++ox) dst[ox * g.stride + kx - g.padding] += src[ox];
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation. input [N,C,H,W], kernel [C',C,kh,kw], bias [C'] or
/// undefined. Output extents follow floor((H + 2p - kh)/stride) + 1.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                    std::size_t stride, std::size_t padding) {
  auto mismatch = [&](const std::string& why) {
    return ShapeError("conv2d: " + why + " (input " + shape_str(input.shape()) + ", kernel " +
                      shape_str(kernel.shape()) + ")");
  };
  if (input.rank() != 4 || kernel.rank() != 4) throw mismatch("expected rank-4 input and kernel");
  if (stride < 1) throw mismatch("stride must be >= 1");
  ConvGeometry g{input.extent(0), input.extent(1), input.extent(2), input.extent(3),
                 kernel.extent(0), kernel.extent(2), kernel.extent(3), stride, padding, 0, 0};
  if (kernel.extent(1) != g.c) throw mismatch("channel count differs");
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) throw mismatch("kernel larger than padded input");
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != g.co))
    throw mismatch("bias shape " + shape_str(bias.shape()) + " does not match output channels");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  using Mat = detail::RowMatrix<Real>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  const std::size_t K = g.patch(), P = g.out_pixels();
  std::vector<Real> out(g.n * g.co * P);
  // Patch matrices are kept for the backward pass when a tape is recorded.
  const bool keep = grad_enabled() && (input.requires_grad() || kernel.requires_grad());
  std::shared_ptr<Real[]> cols_all(new Real[g.pointwise() ? 0 : (keep ? g.n : 1) * K * P]);
  CMap W(kernel.data().data(), Eigen::Index(g.co), Eigen::Index(K));
  for (std::size_t n = 0; n < g.n; ++n) {
    const Real* img = input.data().data() + n * g.c * g.h * g.w;
    const Real* cols = img;
    if (!g.pointwise()) {
      Real* dst = cols_all.get() + (keep ? n * K * P : 0);
      detail::im2col(img, g, dst);
      cols = dst;
    }
    MMap O(out.data() + n * g.co * P, Eigen::Index(g.co), Eigen::Index(P));
    O.noalias() = W * CMap(cols, Eigen::Index(K), Eigen::Index(P));
    if (bias.defined())
      for (std::size_t o = 0; o < g.co; ++o) O.row(Eigen::Index(o)).array() += bias.data()[o];
  }

  std::vector<Tensor<Real>> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<Real>(
      Shape{g.n, g.co, g.ho, g.wo}, std::move(out), std::move(parents),
      [g, cols_all](detail::Node<Real>& self) {
        auto& in = *self.parents[0];
        auto& ker = *self.parents[1];
        detail::Node<Real>* b = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const std::size_t K = g.patch(), P = g.out_pixels();
        std::unique_ptr<Real[]> dcol(new Real[in.requires_grad && !g.pointwise() ? K * P : 0]);
        if (ker.requires_grad) ker.ensure_grad();
        if (in.requires_grad) in.ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        CMap W(ker.data.data(), Eigen::Index(g.co), Eigen::Index(K));
        for (std::size_t n = 0; n < g.n; ++n) {
          CMap dO(self.grad.data() + n * g.co * P, Eigen::Index(g.co), Eigen::Index(P));
          const Real* img = in.data.data() + n * g.c * g.h * g.w;
          if (ker.requires_grad) {
            const Real* cols = g.pointwise() ? img : cols_all.get() + n * K * P;
            MMap dW(ker.grad.data(), Eigen::Index(g.co), Eigen::Index(K));
            dW.noalias() += dO * CMap(cols, Eigen::Index(K), Eigen::Index(P)).transpose();
          }
          if (b && b->requires_grad)
            for (std::size_t o = 0; o < g.co; ++o) {
              // Plain loop: Eigen's vectorised sum peels by address alignment,
              // which would make the result allocation-dependent.
              const Real* row = self.grad.data() + (n * g.co + o) * P;
              Real acc = 0;
              for (std::size_t i = 0; i < P; ++i) acc += row[i];
              b->grad[o] += acc;
            }
          if (in.requires_grad) {
            Real* dimg = in.grad.data() + n * g.c * g.h * g.w;
            if (g.pointwise()) {
              MMap dI(dimg, Eigen::Index(K), Eigen::Index(P));
              dI.noalias() += W.transpose() * dO;
            } else {
              MMap dC(dcol.get(), Eigen::Index(K), Eigen::Index(P));
              dC.noalias() = W.transpose() * dO;
              detail::col2im_add(dcol.get(), g, dimg);
            }
          }
        }
      });
}

}  // namespace agmm
