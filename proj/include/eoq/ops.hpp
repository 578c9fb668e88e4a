#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "eoq/check.hpp"
#include "eoq/quant.hpp"
#include "eoq/tensor.hpp"

namespace eoq {

namespace detail {

// Valid output-position range [lo, hi) for one kernel tap: positions where
// o*stride - padding + t lands inside [0, limit).
inline void tap_range(std::int64_t t, std::int64_t stride, std::int64_t padding,
                      std::int64_t limit, std::int64_t out_dim, std::int64_t& lo,
                      std::int64_t& hi) {
  lo = 0;
  while (lo < out_dim && lo * stride - padding + t < 0) ++lo;
  hi = out_dim;
  while (hi > lo && (hi - 1) * stride - padding + t >= limit) --hi;
}

// im2col: cols is K x HWout row-major, K = Cin*kh*kw. Row k gathers one
// (ci, kh, kw) tap across all output positions; zero outside the image.
template <typename T, typename Src>
void im2col(const Src& x, std::int64_t n, const ConvSpec& sp, std::int64_t H,
            std::int64_t W, std::int64_t Ho, std::int64_t Wo, std::vector<T>& cols) {
  const std::int64_t K = sp.in_channels * sp.kernel_size * sp.kernel_size;
  const std::int64_t HWo = Ho * Wo;
  cols.assign(static_cast<std::size_t>(K * HWo), T(0));
#pragma omp parallel for schedule(static)
  for (std::int64_t k = 0; k < K; ++k) {
    const std::int64_t ci = k / (sp.kernel_size * sp.kernel_size);
    const std::int64_t kr = (k / sp.kernel_size) % sp.kernel_size;
    const std::int64_t kc = k % sp.kernel_size;
    std::int64_t ho_lo, ho_hi, wo_lo, wo_hi;
    tap_range(kr, sp.stride, sp.padding, H, Ho, ho_lo, ho_hi);
    tap_range(kc, sp.stride, sp.padding, W, Wo, wo_lo, wo_hi);
    T* row = cols.data() + k * HWo;
    for (std::int64_t ho = ho_lo; ho < ho_hi; ++ho) {
      const std::int64_t h = ho * sp.stride - sp.padding + kr;
      const std::int64_t base = ((n * sp.in_channels + ci) * H + h) * W;
      const std::int64_t w0 = wo_lo * sp.stride - sp.padding + kc;
      T* dst = row + ho * Wo;
      if constexpr (std::is_same_v<Src, Tensor>) {
        const double* src = x.data.data() + base + w0;
        if (sp.stride == 1) {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[wo_lo + i] = src[i];
        } else {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[wo_lo + i] = src[i * sp.stride];
        }
      } else {
        const std::int32_t* src = x.numerators.data() + base + w0;
        if (sp.stride == 1) {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[wo_lo + i] = src[i];
        } else {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[wo_lo + i] = src[i * sp.stride];
        }
      }
    }
  }
}

// out[M x N] += A[M x K] * B[K x N], all row-major. Register-blocked over
// 4 rows x 16 columns; per output element the reduction still runs in
// ascending k, so results do not depend on thread count or blocking.
template <typename T>
void gemm_acc_t(const T* __restrict A, const T* __restrict B, T* __restrict out,
                std::int64_t M, std::int64_t K, std::int64_t N) {
  constexpr std::int64_t MR = 4, NR = 32;
#pragma omp parallel for schedule(static)
  for (std::int64_t m0 = 0; m0 < M; m0 += MR) {
    const std::int64_t mb = std::min(MR, M - m0);
    for (std::int64_t j0 = 0; j0 < N; j0 += NR) {
      const std::int64_t jb = std::min(NR, N - j0);
      if (mb == MR && jb == NR) {
        T acc[MR][NR] = {};
        for (std::int64_t k = 0; k < K; ++k) {
          const T* b = B + k * N + j0;
          for (std::int64_t mi = 0; mi < MR; ++mi) {
            const T av = A[(m0 + mi) * K + k];
#pragma omp simd
            for (std::int64_t j = 0; j < NR; ++j) acc[mi][j] += av * b[j];
          }
        }
        for (std::int64_t mi = 0; mi < MR; ++mi) {
          T* o = out + (m0 + mi) * N + j0;
#pragma omp simd
          for (std::int64_t j = 0; j < NR; ++j) o[j] += acc[mi][j];
        }
      } else {
        for (std::int64_t mi = 0; mi < mb; ++mi) {
          T* o = out + (m0 + mi) * N + j0;
          const T* a = A + (m0 + mi) * K;
          for (std::int64_t k = 0; k < K; ++k) {
            const T av = a[k];
            if (av == T(0)) continue;
            const T* b = B + k * N + j0;
            for (std::int64_t j = 0; j < jb; ++j) o[j] += av * b[j];
          }
        }
      }
    }
  }
}

inline void gemm_acc(const double* A, const double* B, double* out, std::int64_t M,
                     std::int64_t K, std::int64_t N) {
  gemm_acc_t(A, B, out, M, K, N);
}

inline void gemm_acc_i32(const std::int32_t* A, const std::int32_t* B,
                         std::int32_t* out, std::int64_t M, std::int64_t K,
                         std::int64_t N) {
  gemm_acc_t(A, B, out, M, K, N);
}

// Wide-accumulator fallback for operand magnitudes where int32 could wrap.
inline void gemm_acc_i64(const std::int32_t* A, const std::int32_t* B,
                         std::int64_t* out, std::int64_t M, std::int64_t K,
                         std::int64_t N) {
#pragma omp parallel for schedule(static)
  for (std::int64_t m = 0; m < M; ++m) {
    std::int64_t* o = out + m * N;
    const std::int32_t* a = A + m * K;
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t av = a[k];
      if (av == 0) continue;
      const std::int32_t* b = B + k * N;
#pragma omp simd
      for (std::int64_t j = 0; j < N; ++j) o[j] += av * b[j];
    }
  }
}

inline std::int64_t max_abs(const std::vector<std::int32_t>& v) {
  std::int64_t m = 0;
  for (auto x : v) m = std::max<std::int64_t>(m, std::abs(static_cast<std::int64_t>(x)));
  return m;
}

// Exactness boundary for converting integer accumulators to doubles.
inline constexpr std::int64_t kAccExactLimit = std::int64_t{1} << 53;

inline void check_acc(std::int64_t v) {
  EOQ_CHECK(std::abs(v) < kAccExactLimit,
            "accumulator overflow: bit widths too large for the layer size");
}

} // namespace detail

/// Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,k,k), real path.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& sp) {
  sp.validate();
  EOQ_CHECK(x.shape.size() == 4 && x.shape[1] == sp.in_channels,
            "conv2d: input shape mismatch " + shape_str(x.shape));
  EOQ_CHECK(w.shape == sp.weight_shape(),
            "conv2d: weight shape mismatch " + shape_str(w.shape));
  const std::int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
  const std::int64_t Ho = sp.out_dim(H), Wo = sp.out_dim(W);
  EOQ_CHECK(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  const std::int64_t K = sp.in_channels * sp.kernel_size * sp.kernel_size;

  Tensor out({N, sp.out_channels, Ho, Wo});
  std::vector<double> cols;
  for (std::int64_t n = 0; n < N; ++n) {
    detail::im2col<double>(x, n, sp, H, W, Ho, Wo, cols);
    detail::gemm_acc(w.data.data(), cols.data(),
                     out.data.data() + n * sp.out_channels * Ho * Wo,
                     sp.out_channels, K, Ho * Wo);
  }
  return out;
}

/// Integer-MAC path: numerators multiply-accumulate in integer arithmetic,
/// then one exact power-of-two rescale. Bit-exact equal to the real path on
/// dequantized operands.
inline Tensor conv2d(const QTensor& x, const QTensor& w, const ConvSpec& sp) {
  sp.validate();
  EOQ_CHECK(x.shape.size() == 4 && x.shape[1] == sp.in_channels,
            "conv2d: input shape mismatch " + shape_str(x.shape));
  EOQ_CHECK(w.shape == sp.weight_shape(),
            "conv2d: weight shape mismatch " + shape_str(w.shape));
  const std::int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
  const std::int64_t Ho = sp.out_dim(H), Wo = sp.out_dim(W);
  EOQ_CHECK(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  const std::int64_t K = sp.in_channels * sp.kernel_size * sp.kernel_size;
  const std::int64_t HWo = Ho * Wo;

  const int shift = (x.scale_exp - x.grid_exp) + (w.scale_exp - w.grid_exp);
  const double rescale = std::ldexp(1.0, shift);
  const bool narrow =
      detail::max_abs(x.numerators) * detail::max_abs(w.numerators) * K <
      std::numeric_limits<std::int32_t>::max();

  Tensor out({N, sp.out_channels, Ho, Wo});
  std::vector<std::int32_t> cols;
  std::vector<std::int32_t> acc32(static_cast<std::size_t>(sp.out_channels * HWo));
  std::vector<std::int64_t> acc64;
  for (std::int64_t n = 0; n < N; ++n) {
    detail::im2col<std::int32_t>(x, n, sp, H, W, Ho, Wo, cols);
    double* o = out.data.data() + n * sp.out_channels * HWo;
    if (narrow) {
      std::fill(acc32.begin(), acc32.end(), 0);
      detail::gemm_acc_i32(w.numerators.data(), cols.data(), acc32.data(),
                           sp.out_channels, K, HWo);
      for (std::int64_t i = 0; i < sp.out_channels * HWo; ++i)
        o[i] = static_cast<double>(acc32[static_cast<std::size_t>(i)]) * rescale;
    } else {
      acc64.assign(static_cast<std::size_t>(sp.out_channels * HWo), 0);
      detail::gemm_acc_i64(w.numerators.data(), cols.data(), acc64.data(),
                           sp.out_channels, K, HWo);
      for (std::int64_t i = 0; i < sp.out_channels * HWo; ++i) {
        detail::check_acc(acc64[static_cast<std::size_t>(i)]);
        o[i] = static_cast<double>(acc64[static_cast<std::size_t>(i)]) * rescale;
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor e_in;
  Tensor g_w;
};

namespace detail {

// dcols[K x HWout] = W^T * e, then scattered back to image layout. The
// scatter loops are k-major with disjoint parallel channels, so every input
// element accumulates contributions in a fixed order.
template <typename T>
void col2im_acc(const std::vector<T>& dcols, std::int64_t n, const ConvSpec& sp,
                std::int64_t H, std::int64_t W, std::int64_t Ho, std::int64_t Wo,
                T* img) {
  const std::int64_t kk = sp.kernel_size * sp.kernel_size;
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < sp.in_channels; ++ci) {
    for (std::int64_t t = 0; t < kk; ++t) {
      const std::int64_t k = ci * kk + t;
      const std::int64_t kr = t / sp.kernel_size, kc = t % sp.kernel_size;
      std::int64_t ho_lo, ho_hi, wo_lo, wo_hi;
      tap_range(kr, sp.stride, sp.padding, H, Ho, ho_lo, ho_hi);
      tap_range(kc, sp.stride, sp.padding, W, Wo, wo_lo, wo_hi);
      const T* row = dcols.data() + k * Ho * Wo;
      for (std::int64_t ho = ho_lo; ho < ho_hi; ++ho) {
        const std::int64_t h = ho * sp.stride - sp.padding + kr;
        const std::int64_t w0 = wo_lo * sp.stride - sp.padding + kc;
        T* dst = img + (ci * H + h) * W + w0;
        const T* src = row + ho * Wo + wo_lo;
        if (sp.stride == 1) {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[i] += src[i];
        } else {
          for (std::int64_t i = 0; i < wo_hi - wo_lo; ++i) dst[i * sp.stride] += src[i];
        }
      }
    }
  }
  (void)n;
}

} // namespace detail

/// Backward of conv2d on the real path: e_in receives the transposed
/// convolution of e_out, g_w the correlation of x with e_out.
inline ConvGrads conv2d_backward(const Tensor& e_out, const Tensor& x,
                                 const Tensor& w, const ConvSpec& sp) {
  sp.validate();
  const std::int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
  const std::int64_t Ho = sp.out_dim(H), Wo = sp.out_dim(W);
  EOQ_CHECK(e_out.shape == Shape({N, sp.out_channels, Ho, Wo}),
            "conv2d_backward: error shape mismatch " + shape_str(e_out.shape));
  EOQ_CHECK(w.shape == sp.weight_shape(),
            "conv2d_backward: weight shape mismatch");
  const std::int64_t K = sp.in_channels * sp.kernel_size * sp.kernel_size;
  const std::int64_t HWo = Ho * Wo;

  // W^T as K x Cout for the data gradient GEMM.
  std::vector<double> wt(static_cast<std::size_t>(K * sp.out_channels));
  for (std::int64_t co = 0; co < sp.out_channels; ++co)
    for (std::int64_t k = 0; k < K; ++k)
      wt[static_cast<std::size_t>(k * sp.out_channels + co)] =
          w.data[static_cast<std::size_t>(co * K + k)];

  ConvGrads g{Tensor(x.shape), Tensor(w.shape)};
  std::vector<double> cols, dcols(static_cast<std::size_t>(K * HWo));
  for (std::int64_t n = 0; n < N; ++n) {
    const double* e_n = e_out.data.data() + n * sp.out_channels * HWo;
    std::fill(dcols.begin(), dcols.end(), 0.0);
    detail::gemm_acc(wt.data(), e_n, dcols.data(), K, sp.out_channels, HWo);
    detail::col2im_acc(dcols, n, sp, H, W, Ho, Wo,
                       g.e_in.data.data() + n * sp.in_channels * H * W);
    // g_w += e_n * cols^T, reduction over images stays in image order.
    detail::im2col<double>(x, n, sp, H, W, Ho, Wo, cols);
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < sp.out_channels; ++co) {
      const double* e_row = e_n + co * HWo;
      double* gw_row = g.g_w.data.data() + co * K;
      for (std::int64_t k = 0; k < K; ++k) {
        const double* c_row = cols.data() + k * HWo;
        double s = 0.0;
#pragma omp simd reduction(+ : s)
        for (std::int64_t j = 0; j < HWo; ++j) s += e_row[j] * c_row[j];
        gw_row[k] += s;
      }
    }
  }
  return g;
}

/// Backward of conv2d on the integer path. All three operands carry
/// power-of-two grids; MACs run on numerators and rescale exactly.
inline ConvGrads conv2d_backward(const QTensor& e_out, const QTensor& x,
                                 const QTensor& w, const ConvSpec& sp) {
  sp.validate();
  const std::int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
  const std::int64_t Ho = sp.out_dim(H), Wo = sp.out_dim(W);
  EOQ_CHECK(e_out.shape == Shape({N, sp.out_channels, Ho, Wo}),
            "conv2d_backward: error shape mismatch " + shape_str(e_out.shape));
  EOQ_CHECK(w.shape == sp.weight_shape(),
            "conv2d_backward: weight shape mismatch");
  const std::int64_t K = sp.in_channels * sp.kernel_size * sp.kernel_size;
  const std::int64_t HWo = Ho * Wo;

  const std::int64_t me = detail::max_abs(e_out.numerators);
  const std::int64_t mw = detail::max_abs(w.numerators);
  const std::int64_t mx = detail::max_abs(x.numerators);
  const bool narrow_e = me * mw * sp.out_channels <
                        std::numeric_limits<std::int32_t>::max();
  // g_w reduction spans every image and output position.
  const bool narrow_w = me * mx * HWo * N <
                        std::numeric_limits<std::int32_t>::max();

  std::vector<std::int32_t> wt(static_cast<std::size_t>(K * sp.out_channels));
  for (std::int64_t co = 0; co < sp.out_channels; ++co)
    for (std::int64_t k = 0; k < K; ++k)
      wt[static_cast<std::size_t>(k * sp.out_channels + co)] =
          w.numerators[static_cast<std::size_t>(co * K + k)];

  const int shift_e = (e_out.scale_exp - e_out.grid_exp) + (w.scale_exp - w.grid_exp);
  const int shift_w = (e_out.scale_exp - e_out.grid_exp) + (x.scale_exp - x.grid_exp);
  const double resc_e = std::ldexp(1.0, shift_e);
  const double resc_w = std::ldexp(1.0, shift_w);

  ConvGrads g{Tensor(x.shape), Tensor(sp.weight_shape())};
  std::vector<std::int64_t> gw_acc(static_cast<std::size_t>(sp.out_channels * K), 0);
  std::vector<std::int32_t> cols;
  std::vector<std::int32_t> dcols32;
  std::vector<std::int64_t> dcols64;
  std::vector<std::int32_t> eimg32(static_cast<std::size_t>(sp.in_channels * H * W));
  std::vector<std::int64_t> eimg64;
  for (std::int64_t n = 0; n < N; ++n) {
    const std::int32_t* e_n = e_out.numerators.data() + n * sp.out_channels * HWo;
    double* ein_n = g.e_in.data.data() + n * sp.in_channels * H * W;
    if (narrow_e) {
      dcols32.assign(static_cast<std::size_t>(K * HWo), 0);
      detail::gemm_acc_i32(wt.data(), e_n, dcols32.data(), K, sp.out_channels, HWo);
      std::fill(eimg32.begin(), eimg32.end(), 0);
      detail::col2im_acc(dcols32, n, sp, H, W, Ho, Wo, eimg32.data());
      for (std::int64_t i = 0; i < sp.in_channels * H * W; ++i)
        ein_n[i] = static_cast<double>(eimg32[static_cast<std::size_t>(i)]) * resc_e;
    } else {
      dcols64.assign(static_cast<std::size_t>(K * HWo), 0);
      std::vector<std::int64_t> wt64(wt.begin(), wt.end());
      // Rare wide path; plain loops.
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t co = 0; co < sp.out_channels; ++co) {
          const std::int64_t av = wt64[static_cast<std::size_t>(k * sp.out_channels + co)];
          if (av == 0) continue;
          for (std::int64_t j = 0; j < HWo; ++j)
            dcols64[static_cast<std::size_t>(k * HWo + j)] += av * e_n[co * HWo + j];
        }
      eimg64.assign(static_cast<std::size_t>(sp.in_channels * H * W), 0);
      detail::col2im_acc(dcols64, n, sp, H, W, Ho, Wo, eimg64.data());
      for (std::int64_t i = 0; i < sp.in_channels * H * W; ++i) {
        detail::check_acc(eimg64[static_cast<std::size_t>(i)]);
        ein_n[i] = static_cast<double>(eimg64[static_cast<std::size_t>(i)]) * resc_e;
      }
    }

    detail::im2col<std::int32_t>(x, n, sp, H, W, Ho, Wo, cols);
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < sp.out_channels; ++co) {
      const std::int32_t* e_row = e_n + co * HWo;
      std::int64_t* gw_row = gw_acc.data() + co * K;
      for (std::int64_t k = 0; k < K; ++k) {
        const std::int32_t* c_row = cols.data() + k * HWo;
        std::int64_t s = 0;
        if (narrow_w) {
          std::int32_t s32 = 0;
#pragma omp simd reduction(+ : s32)
          for (std::int64_t j = 0; j < HWo; ++j) s32 += e_row[j] * c_row[j];
          s = s32;
        } else {
#pragma omp simd reduction(+ : s)
          for (std::int64_t j = 0; j < HWo; ++j)
            s += static_cast<std::int64_t>(e_row[j]) * c_row[j];
        }
        gw_row[k] += s;
      }
    }
  }
  for (std::int64_t i = 0; i < sp.out_channels * K; ++i) {
    detail::check_acc(gw_acc[static_cast<std::size_t>(i)]);
    g.g_w.data[static_cast<std::size_t>(i)] =
        static_cast<double>(gw_acc[static_cast<std::size_t>(i)]) * resc_w;
  }
  return g;
}

/// x (N,F) * w (C,F)^T -> (N,C), real path.
inline Tensor linear(const Tensor& x, const Tensor& w) {
  EOQ_CHECK(x.shape.size() == 2 && w.shape.size() == 2 && x.shape[1] == w.shape[1],
            "linear: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
  const std::int64_t N = x.shape[0], F = x.shape[1], C = w.shape[0];
  Tensor out({N, C});
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xr = x.data.data() + n * F;
      const double* wr = w.data.data() + c * F;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::int64_t f = 0; f < F; ++f) s += xr[f] * wr[f];
      out[n * C + c] = s;
    }
  return out;
}

/// Integer-MAC linear path.
inline Tensor linear(const QTensor& x, const QTensor& w) {
  EOQ_CHECK(x.shape.size() == 2 && w.shape.size() == 2 && x.shape[1] == w.shape[1],
            "linear: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
  const std::int64_t N = x.shape[0], F = x.shape[1], C = w.shape[0];
  const double rescale =
      std::ldexp(1.0, (x.scale_exp - x.grid_exp) + (w.scale_exp - w.grid_exp));
  Tensor out({N, C});
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int32_t* xr = x.numerators.data() + n * F;
      const std::int32_t* wr = w.numerators.data() + c * F;
      std::int64_t s = 0;
#pragma omp simd reduction(+ : s)
      for (std::int64_t f = 0; f < F; ++f)
        s += static_cast<std::int64_t>(xr[f]) * wr[f];
      detail::check_acc(s);
      out[n * C + c] = static_cast<double>(s) * rescale;
    }
  return out;
}

struct LinearGrads {
  Tensor e_in;
  Tensor g_w;
};

inline LinearGrads linear_backward(const Tensor& e, const Tensor& x, const Tensor& w) {
  const std::int64_t N = x.shape[0], F = x.shape[1], C = w.shape[0];
  EOQ_CHECK(e.shape == Shape({N, C}), "linear_backward: error shape mismatch");
  LinearGrads g{Tensor({N, F}), Tensor({C, F})};
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double ev = e[n * C + c];
      if (ev == 0.0) continue;
      const double* wr = w.data.data() + c * F;
      double* er = g.e_in.data.data() + n * F;
#pragma omp simd
      for (std::int64_t f = 0; f < F; ++f) er[f] += ev * wr[f];
    }
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t n = 0; n < N; ++n) {
      const double ev = e[n * C + c];
      if (ev == 0.0) continue;
      const double* xr = x.data.data() + n * F;
      double* gr = g.g_w.data.data() + c * F;
#pragma omp simd
      for (std::int64_t f = 0; f < F; ++f) gr[f] += ev * xr[f];
    }
  return g;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

/// Subgradient at 0 is 0: e passes only where x is strictly positive.
inline Tensor relu_backward(const Tensor& e, const Tensor& x) {
  EOQ_CHECK(e.shape == x.shape, "relu_backward: shape mismatch");
  Tensor out(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? e[i] : 0.0;
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  EOQ_CHECK(a.shape == b.shape, "add: shape mismatch");
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor scalar_mul(double c, const Tensor& x) {
  Tensor out(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
  return out;
}

inline Tensor scalar_add(const Tensor& x, double c) {
  Tensor out(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] + c;
  return out;
}

/// (N,C,H,W) -> (N,C) spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  EOQ_CHECK(x.shape.size() == 4, "global_avg_pool: expected 4-D input");
  const std::int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  Tensor out({N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = x.data.data() + (n * C + c) * HW;
      double s = 0.0;
      for (std::int64_t j = 0; j < HW; ++j) s += p[j];
      out[n * C + c] = s / static_cast<double>(HW);
    }
  return out;
}

inline Tensor global_avg_pool_backward(const Tensor& e, const Shape& in_shape) {
  const std::int64_t N = in_shape[0], C = in_shape[1], HW = in_shape[2] * in_shape[3];
  EOQ_CHECK(e.shape == Shape({N, C}), "global_avg_pool_backward: shape mismatch");
  Tensor out(in_shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double v = e[n * C + c] / static_cast<double>(HW);
      double* p = out.data.data() + (n * C + c) * HW;
      for (std::int64_t j = 0; j < HW; ++j) p[j] = v;
    }
  return out;
}

/// Classification targets; a mixup pair blends two label sets with weight
/// lam on labels_a.
struct LabelBatch {
  std::vector<std::int32_t> a;
  std::vector<std::int32_t> b; // empty unless mixup
  double lam = 1.0;

  static LabelBatch plain(std::vector<std::int32_t> labels) {
    return LabelBatch{std::move(labels), {}, 1.0};
  }
  bool mixed() const { return !b.empty(); }
};

struct LossResult {
  double loss = 0.0;
  Tensor e_logits;
};

/// Numerically stabilized softmax cross-entropy, mean over the batch.
/// e_logits = (softmax - blended one-hot) / N.
inline LossResult softmax_xent(const Tensor& logits, const LabelBatch& labels) {
  EOQ_CHECK(logits.shape.size() == 2, "softmax_xent: expected (N,C) logits");
  const std::int64_t N = logits.shape[0], C = logits.shape[1];
  EOQ_CHECK(static_cast<std::int64_t>(labels.a.size()) == N,
            "softmax_xent: label count mismatch");
  if (labels.mixed())
    EOQ_CHECK(static_cast<std::int64_t>(labels.b.size()) == N,
              "softmax_xent: mixup label count mismatch");

  LossResult r;
  r.e_logits = Tensor(logits.shape);
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    const double* row = logits.data.data() + n * C;
    for (std::int64_t c = 0; c < C; ++c)
      EOQ_CHECK(std::isfinite(row[c]), "softmax_xent: non-finite logit");
    const std::int32_t la = labels.a[static_cast<std::size_t>(n)];
    EOQ_CHECK(la >= 0 && la < C, "softmax_xent: label index out of range");
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    const double logz = std::log(z) + m;
    double* er = r.e_logits.data.data() + n * C;
    for (std::int64_t c = 0; c < C; ++c)
      er[c] = std::exp(row[c] - logz) / static_cast<double>(N);
    if (labels.mixed()) {
      const std::int32_t lb = labels.b[static_cast<std::size_t>(n)];
      EOQ_CHECK(lb >= 0 && lb < C, "softmax_xent: label index out of range");
      total += labels.lam * (logz - row[la]) + (1.0 - labels.lam) * (logz - row[lb]);
      er[la] -= labels.lam / static_cast<double>(N);
      er[lb] -= (1.0 - labels.lam) / static_cast<double>(N);
    } else {
      total += logz - row[la];
      er[la] -= 1.0 / static_cast<double>(N);
    }
  }
  r.loss = total / static_cast<double>(N);
  return r;
}

} // namespace eoq
