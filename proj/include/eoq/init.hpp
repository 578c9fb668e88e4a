#pragma once

#include <cmath>

#include "eoq/check.hpp"
#include "eoq/rng.hpp"
#include "eoq/tensor.hpp"

namespace eoq {

/// i.i.d. N(0, 2/fan_in) samples, deterministic per stream.
inline Tensor kaiming_init(Shape shape, std::int64_t fan_in, Rng& rng) {
  EOQ_CHECK(fan_in >= 1, "kaiming_init: fan_in must be >= 1");
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
  return t;
}

inline Tensor kaiming_init(Shape shape, std::int64_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  return kaiming_init(std::move(shape), fan_in, rng);
}

/// Layer-wise Fixup coefficient L^(-1/(2m-2)) applied to residual-branch
/// weights; singular at m < 2.
inline double fixup_scale(std::int64_t L, std::int64_t m) {
  EOQ_CHECK(L >= 1, "fixup_scale: L must be >= 1");
  EOQ_CHECK(m >= 2, "fixup_scale: undefined for branch depth m < 2");
  return std::pow(static_cast<double>(L), -1.0 / (2.0 * static_cast<double>(m) - 2.0));
}

struct FixupInitConfig {
  std::int64_t L = 1;       // total residual blocks in the network
  std::int64_t m = 2;       // layers per residual branch
  std::uint64_t seed = 0;
};

} // namespace eoq
