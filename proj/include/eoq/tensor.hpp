#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "eoq/check.hpp"

namespace eoq {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    EOQ_CHECK(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense real-valued tensor, NCHW layout for image data.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), 0.0) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    EOQ_CHECK(static_cast<std::int64_t>(data.size()) == numel(shape),
              "tensor data length does not match shape " + shape_str(shape));
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // 4-D accessors (n, c, h, w)
  std::int64_t idx4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }
  double& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[static_cast<std::size_t>(idx4(n, c, h, w))];
  }
  double at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[static_cast<std::size_t>(idx4(n, c, h, w))];
  }

  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
};

/// 2-D convolution geometry. Square kernels, symmetric padding.
struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_size = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;

  void validate() const {
    EOQ_CHECK(in_channels >= 1 && out_channels >= 1, "conv channels must be >= 1");
    EOQ_CHECK(kernel_size >= 1 && stride >= 1, "conv kernel_size and stride must be >= 1");
    EOQ_CHECK(padding >= 0, "conv padding must be >= 0");
  }
  std::int64_t out_dim(std::int64_t in_dim) const {
    return (in_dim + 2 * padding - kernel_size) / stride + 1;
  }
  Shape weight_shape() const { return {out_channels, in_channels, kernel_size, kernel_size}; }
};

} // namespace eoq
