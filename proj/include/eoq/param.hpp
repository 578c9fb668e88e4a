#pragma once

#include <string>
#include <utility>

#include "eoq/quant.hpp"
#include "eoq/tensor.hpp"

namespace eoq {

/// Storage grid of a trainable parameter. Quantized weights live on the
/// clamp grid of their bit width; scale/bias live on the basic grid (gamma
/// starts at exactly 1, which the clamp grid cannot represent).
enum class ParamStorage { real, clamp_grid, basic_grid };

struct Param {
  std::string name;
  ParamStorage storage = ParamStorage::real;
  int k = 8; // grid bits when storage != real

  Tensor value;  // real view; authoritative for real storage, dequantized cache otherwise
  QTensor q;     // authoritative when storage != real
  Tensor grad;   // gradient written by the last backward pass

  Param() = default;
  Param(std::string n, Tensor v)
      : name(std::move(n)), storage(ParamStorage::real), value(std::move(v)) {}

  bool quantized() const { return storage != ParamStorage::real; }

  /// (Re)stores a real tensor through the declared grid.
  void assign(const Tensor& t) {
    switch (storage) {
      case ParamStorage::real:
        value = t;
        break;
      case ParamStorage::clamp_grid:
        q = clamp_quant(t, BitWidth(k));
        value = q.dequantize();
        break;
      case ParamStorage::basic_grid:
        q = basic_quant(t, BitWidth(k));
        value = q.dequantize();
        break;
    }
  }

  /// Switches storage mode and re-stores the current value.
  void set_storage(ParamStorage s, int bits) {
    storage = s;
    k = bits;
    assign(value);
  }

  double scalar() const { return value[0]; }
};

} // namespace eoq
