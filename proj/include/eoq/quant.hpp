#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "eoq/check.hpp"
#include "eoq/tensor.hpp"

namespace eoq {

/// Bit width of a quantized value. All quantizers in the toolkit operate on
/// power-of-two grids with 2..16 bits.
struct BitWidth {
  int k;

  explicit BitWidth(int bits) : k(bits) {
    EOQ_CHECK(k >= 2 && k <= 16, "bit width must be in [2,16]");
  }
  /// Grid denominator exponent: values are multiples of 1/2^(k-1).
  int grid_exp() const { return k - 1; }
  /// Largest clamp-grid numerator, 2^(k-1)-1.
  std::int32_t clamp_limit() const { return (std::int32_t{1} << (k - 1)) - 1; }
};

/// The (k_w, k_a, k_b, k_gamma, k_e, k_g, k_u) tuple governing every
/// quantizer in the model.
struct BitWidthConfig {
  BitWidth k_w, k_a, k_b, k_gamma, k_e, k_g, k_u;

  static BitWidthConfig uniform(int k) {
    return BitWidthConfig{BitWidth(k), BitWidth(k), BitWidth(k), BitWidth(k),
                          BitWidth(k), BitWidth(k), BitWidth(k)};
  }
  static BitWidthConfig all8() { return uniform(8); }

  bool operator==(const BitWidthConfig& o) const {
    return k_w.k == o.k_w.k && k_a.k == o.k_a.k && k_b.k == o.k_b.k &&
           k_gamma.k == o.k_gamma.k && k_e.k == o.k_e.k && k_g.k == o.k_g.k &&
           k_u.k == o.k_u.k;
  }
};

// Basic quantization is range-unbounded; numerators beyond the 32-bit
// accumulator width are an error, not a silent wrap. Clamp-quantized tensors
// are bounded by 2^(k-1)-1 and always fit int16 (the serialized form).
inline constexpr std::int32_t kNumeratorLimit =
    std::numeric_limits<std::int32_t>::max();

/// Tensor whose elements lie exactly on a power-of-two grid:
/// value = numerator * 2^(scale_exp - grid_exp). scale_exp is 0 for
/// basic/clamp grids and carries the power-of-two scale of scale quantization.
struct QTensor {
  Shape shape;
  std::vector<std::int32_t> numerators;
  int grid_exp = 0;
  int scale_exp = 0;
  int bit_width = 8;

  QTensor() = default;
  QTensor(Shape s, int grid_e, int scale_e, int k)
      : shape(std::move(s)),
        numerators(static_cast<std::size_t>(numel(shape)), 0),
        grid_exp(grid_e),
        scale_exp(scale_e),
        bit_width(k) {}

  std::int64_t size() const { return static_cast<std::int64_t>(numerators.size()); }

  /// Exact real value of element i.
  double value(std::int64_t i) const {
    return std::ldexp(static_cast<double>(numerators[static_cast<std::size_t>(i)]),
                      scale_exp - grid_exp);
  }

  Tensor dequantize() const {
    Tensor out(shape);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = value(i);
    return out;
  }

  bool scalar_like() const { return size() == 1; }

  /// Re-expresses real values known to lie on the grid 2^(scale_e - grid_e)
  /// as numerators; off-grid or out-of-range input is a hard error. Used to
  /// put exact dyadic intermediates (bias adds, residual sums) back on the
  /// integer path.
  static QTensor from_grid_exact(const Tensor& x, int grid_e, int scale_e, int k) {
    QTensor q(x.shape, grid_e, scale_e, k);
    const double step = std::ldexp(1.0, scale_e - grid_e);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double n = x[i] / step;
      const double r = std::nearbyint(n);
      EOQ_CHECK(r == n, "value off quantization grid in exact conversion");
      EOQ_CHECK(std::abs(r) <= kNumeratorLimit,
                "quantizer numerator overflow: value out of representable range");
      q.numerators[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(r);
    }
    return q;
  }
};

/// Nearest-integer rounding, ties away from zero.
inline std::int64_t round_nearest(double x) {
  EOQ_CHECK(std::isfinite(x), "non-finite value entering quantizer");
  EOQ_CHECK(std::abs(x) < 9.0e18,
            "quantizer numerator overflow: value out of representable range");
  return static_cast<std::int64_t>(std::llround(x));
}

/// Basic quantization: Q(x,k) = R(x * 2^(k-1)) / 2^(k-1). The grid is
/// unbounded in range; numerators exceeding the int16 envelope are an error
/// rather than a silent wrap.
inline QTensor basic_quant(const Tensor& x, BitWidth k) {
  QTensor q(x.shape, k.grid_exp(), 0, k.k);
  const double f = std::ldexp(1.0, k.grid_exp());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const std::int64_t n = round_nearest(x[i] * f);
    EOQ_CHECK(std::abs(n) <= kNumeratorLimit,
              "quantizer numerator overflow: value out of representable range");
    q.numerators[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(n);
  }
  return q;
}

/// Clamp quantization: basic quantization constrained to
/// [-1 + 1/2^(k-1), 1 - 1/2^(k-1)], i.e. numerators in [-(2^(k-1)-1), 2^(k-1)-1].
inline QTensor clamp_quant(const Tensor& x, BitWidth k) {
  QTensor q(x.shape, k.grid_exp(), 0, k.k);
  const double f = std::ldexp(1.0, k.grid_exp());
  const std::int64_t lim = k.clamp_limit();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    std::int64_t n = round_nearest(x[i] * f);
    if (n > lim) n = lim;
    if (n < -lim) n = -lim;
    q.numerators[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(n);
  }
  return q;
}

/// Power-of-two scale exponent: s = R(log2(max|x|)). An all-zero tensor has
/// no defined scale in the paper's formula; we return s = 0 so zero tensors
/// (early gradients) quantize to zero without error.
inline int pow2_scale(const Tensor& x) {
  double m = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    EOQ_CHECK(std::isfinite(x[i]), "non-finite value entering quantizer");
    m = std::max(m, std::abs(x[i]));
  }
  if (m == 0.0) return 0;
  return static_cast<int>(round_nearest(std::log2(m)));
}

/// Scale quantization: SQ(x,k) = 2^s * CQ(x / 2^s, k) with s = pow2_scale(x).
inline QTensor scale_quant(const Tensor& x, BitWidth k) {
  const int s = pow2_scale(x);
  const double inv = std::ldexp(1.0, -s);
  Tensor scaled(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) scaled[i] = x[i] * inv;
  QTensor q = clamp_quant(scaled, k);
  q.scale_exp = s;
  return q;
}

inline Tensor dequantize(const QTensor& q) { return q.dequantize(); }

} // namespace eoq
