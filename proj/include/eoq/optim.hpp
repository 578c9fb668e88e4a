#pragma once

#include <cstdint>
#include <vector>

#include "eoq/check.hpp"
#include "eoq/network.hpp"
#include "eoq/param.hpp"

namespace eoq {

/// Piecewise-constant decay: x0.1 at 50% and another x0.1 at 75% of the
/// epoch budget.
inline double lr_schedule(double lr0, std::int64_t epoch, std::int64_t total_epochs) {
  EOQ_CHECK(total_epochs >= 1, "lr_schedule: total_epochs must be >= 1");
  double lr = lr0;
  if (2 * epoch >= total_epochs) lr *= 0.1;
  if (4 * epoch >= 3 * total_epochs) lr *= 0.1;
  return lr;
}

/// SGD with real-precision momentum buffers. Quantized parameters take the
/// Eq. 13 update u = Q_u(lr * v) and are re-stored on their grids, so stored
/// weights remain low-bit integers; real parameters (classifier head, float
/// modes) update directly.
struct OptimState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0; // off by default; applied before quantization
  std::vector<Tensor> velocity;

  // Dead-update accounting: coordinates whose nonzero quantized update left
  // the stored numerator unchanged. Reset by the caller per epoch.
  std::uint64_t dead_updates = 0;
  std::uint64_t total_updates = 0;

  void ensure(const std::vector<Param*>& params) {
    EOQ_CHECK(momentum >= 0.0 && momentum < 1.0, "sgd: momentum must be in [0,1)");
    EOQ_CHECK(lr > 0.0, "sgd: learning rate must be positive");
    if (velocity.size() == params.size()) return;
    velocity.clear();
    for (const Param* p : params) velocity.emplace_back(p->value.shape);
  }
};

inline void sgd_step(OptimState& st, const std::vector<Param*>& params,
                     const QuantPolicy& qp) {
  st.ensure(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    EOQ_CHECK(p.grad.shape == p.value.shape,
              "sgd: gradient shape mismatch for " + p.name);
    Tensor& v = st.velocity[i];
    for (std::int64_t j = 0; j < v.size(); ++j) {
      double g = p.grad[j];
      if (st.weight_decay != 0.0) g += st.weight_decay * p.value[j];
      v[j] = st.momentum * v[j] + g;
    }
    if (p.quantized() && qp.enabled) {
      const Tensor u = qp.q_u(scalar_mul(st.lr, v)).dequantize();
      Tensor next(p.value.shape);
      for (std::int64_t j = 0; j < next.size(); ++j) next[j] = p.value[j] - u[j];
      const std::vector<std::int32_t> before = p.q.numerators;
      p.assign(next);
      for (std::int64_t j = 0; j < next.size(); ++j) {
        ++st.total_updates;
        if (u[j] != 0.0 &&
            p.q.numerators[static_cast<std::size_t>(j)] ==
                before[static_cast<std::size_t>(j)])
          ++st.dead_updates;
      }
    } else {
      for (std::int64_t j = 0; j < v.size(); ++j) p.value[j] -= st.lr * v[j];
      st.total_updates += static_cast<std::uint64_t>(v.size());
    }
  }
}

} // namespace eoq
