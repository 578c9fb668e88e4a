#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "eoq/check.hpp"
#include "eoq/init.hpp"
#include "eoq/instrument.hpp"
#include "eoq/ops.hpp"
#include "eoq/param.hpp"
#include "eoq/quant.hpp"

namespace eoq {

inline double tsum(const Tensor& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) s += t[i];
  return s;
}

/// Quantizer strategy of one training mode: either every site applies its
/// Eq. 8-13 quantizer, or (float modes) every site is the identity.
struct QuantPolicy {
  bool enabled = false;
  BitWidthConfig cfg = BitWidthConfig::all8();

  QTensor q_a1(const Tensor& x) const {
    trace::record_site(trace::QuantSite::a1);
    return basic_quant(x, cfg.k_a);
  }
  QTensor q_a2(const Tensor& x) const {
    trace::record_site(trace::QuantSite::a2);
    return clamp_quant(x, cfg.k_a);
  }
  QTensor q_b(const Tensor& b) const {
    trace::record_site(trace::QuantSite::b);
    return basic_quant(b, cfg.k_b);
  }
  QTensor q_gamma(const Tensor& g) const {
    trace::record_site(trace::QuantSite::gamma);
    return basic_quant(g, cfg.k_gamma);
  }
  QTensor q_e(const Tensor& e) const {
    trace::record_site(trace::QuantSite::e);
    return scale_quant(e, cfg.k_e);
  }
  QTensor q_g(const Tensor& g) const {
    trace::record_site(trace::QuantSite::g);
    return scale_quant(g, cfg.k_g);
  }
  QTensor q_u(const Tensor& u) const {
    trace::record_site(trace::QuantSite::u);
    return scale_quant(u, cfg.k_u);
  }
  /// Stored weights already live on the clamp grid; Q_w at the conv site
  /// reuses the stored numerators (idempotent by construction).
  const QTensor& q_w(const Param& w) const {
    trace::record_site(trace::QuantSite::w);
    return w.q;
  }
};

/// Straight-through estimator across a quantizer: identity for basic/scale
/// quantizers, clipped to the open clamp interval for clamp quantizers
/// (gradient 0 at and beyond the bound).
enum class QuantKind { basic, clamp, scale };

inline Tensor ste_quantizer_backward(const Tensor& e, const Tensor& x_prequant,
                                     QuantKind kind, BitWidth k) {
  EOQ_CHECK(e.shape == x_prequant.shape, "ste_quantizer_backward: shape mismatch");
  if (kind != QuantKind::clamp) return e;
  const double bound = 1.0 - std::ldexp(1.0, -(k.k - 1));
  Tensor out(e.shape);
  for (std::int64_t i = 0; i < e.size(); ++i)
    out[i] = (std::abs(x_prequant[i]) < bound) ? e[i] : 0.0;
  return out;
}

/// Activation flowing between layers: always carries an exact real view;
/// carries grid numerators too whenever the mode keeps it on a grid.
struct Act {
  Tensor real;
  QTensor q;
  bool on_grid = false;

  static Act from_real(Tensor t) {
    Act a;
    a.real = std::move(t);
    return a;
  }
  static Act from_q(QTensor qq) {
    Act a;
    a.real = qq.dequantize();
    a.q = std::move(qq);
    a.on_grid = true;
    return a;
  }
};

/// One quantized conv layer of Fig. 1 with its Fixup decorations:
/// x1 = x0 + Q_b(b1); x2 = Q_a1(conv(x1)); x3 = Q_g(gamma) x2;
/// x4 = x3 + Q_b(b2); x5 = Q_a2(relu(x4)).
struct FixupUnit {
  Param w, b1, b2, gamma;
  ConvSpec spec;
  std::int64_t block_index = 0;
  std::int64_t branch_depth = 2; // m_i

  struct Cache {
    bool valid = false;
    Act x1;
    Tensor x2;
    Tensor x4;
    double gamma_q = 1.0; // quantized gamma used in the forward
  } cache;

  Act forward(const Act& x0, const QuantPolicy& qp) {
    cache = Cache{};
    if (qp.enabled) {
      EOQ_CHECK(x0.on_grid && x0.q.scale_exp == 0,
                "fixup unit: input not on the activation grid");
      const QTensor b1q = qp.q_b(b1.value);
      const Tensor x1r = scalar_add(x0.real, b1q.value(0));
      const int g1 = std::max(x0.q.grid_exp, b1q.grid_exp);
      const QTensor x1q = QTensor::from_grid_exact(x1r, g1, 0, std::max(x0.q.bit_width, b1q.bit_width));
      const Tensor x2raw = conv2d(x1q, qp.q_w(w), spec);
      const QTensor x2q = qp.q_a1(x2raw);
      Tensor x2 = x2q.dequantize();
      const QTensor gq = qp.q_gamma(gamma.value);
      cache.gamma_q = gq.value(0);
      Tensor x3 = scalar_mul(cache.gamma_q, x2);
      const QTensor b2q = qp.q_b(b2.value);
      const Tensor x4 = scalar_add(x3, b2q.value(0));
      QTensor x5q = qp.q_a2(relu(x4));
      cache.valid = true;
      cache.x1 = Act::from_q(x1q);
      cache.x1.real = x1r; // keep the exact sum (identical values)
      cache.x2 = std::move(x2);
      cache.x4 = x4;
      return Act::from_q(std::move(x5q));
    }
    const Tensor x1 = scalar_add(x0.real, b1.scalar());
    Tensor x2 = conv2d(x1, w.value, spec);
    cache.gamma_q = gamma.scalar();
    Tensor x4 = scalar_add(scalar_mul(cache.gamma_q, x2), b2.scalar());
    Act out = Act::from_real(relu(x4));
    cache.valid = true;
    cache.x1 = Act::from_real(x1);
    cache.x2 = std::move(x2);
    cache.x4 = std::move(x4);
    return out;
  }

  /// Backward per Eq. 3-4; returns the error at x0 and fills the four
  /// parameter gradients. STE: clipped at the Q_a2 clamp, identity at
  /// basic/scale quantizers.
  Tensor backward(const Tensor& e0, const QuantPolicy& qp) {
    EOQ_CHECK(cache.valid, "backward before forward");
    if (qp.enabled) {
      const Tensor e_a2 =
          ste_quantizer_backward(e0, relu(cache.x4), QuantKind::clamp, qp.cfg.k_a);
      const Tensor e1 = relu_backward(e_a2, cache.x4);
      // e2 == e1 (bias add), Eq. 3.
      const QTensor e3q = qp.q_e(scalar_mul(cache.gamma_q, e1));
      const ConvGrads cg = conv2d_backward(e3q, cache.x1.q, w.q, spec);
      const QTensor e4q = qp.q_e(cg.e_in);
      const Tensor e4 = e4q.dequantize();
      w.grad = qp.q_g(cg.g_w).dequantize();
      b1.grad = qp.q_g(Tensor::scalar(tsum(e4))).dequantize();
      b2.grad = qp.q_g(Tensor::scalar(tsum(e1))).dequantize();
      Tensor e2x2(e1.shape);
      for (std::int64_t i = 0; i < e1.size(); ++i) e2x2[i] = e1[i] * cache.x2[i];
      gamma.grad = qp.q_g(Tensor::scalar(tsum(e2x2))).dequantize();
      cache.valid = false;
      return e4; // e5 = e4
    }
    const Tensor e1 = relu_backward(e0, cache.x4);
    const Tensor e3 = scalar_mul(cache.gamma_q, e1);
    const ConvGrads cg = conv2d_backward(e3, cache.x1.real, w.value, spec);
    w.grad = cg.g_w;
    b1.grad = Tensor::scalar(tsum(cg.e_in));
    b2.grad = Tensor::scalar(tsum(e1));
    double gg = 0.0;
    for (std::int64_t i = 0; i < e1.size(); ++i) gg += e1[i] * cache.x2[i];
    gamma.grad = Tensor::scalar(gg);
    cache.valid = false;
    return cg.e_in;
  }
};

/// Residual block: x_out = branch(x_in) + shortcut(x_in). The branch is a
/// chain of branch_depth FixupUnits; the shortcut is identity or a strided
/// 1x1 projection (main path, unscaled, no gamma/bias decoration).
struct ResidualBlock {
  std::vector<FixupUnit> units;
  bool has_projection = false;
  Param proj_w;
  ConvSpec proj_spec;

  struct Cache {
    bool valid = false;
    Act in;
  } cache;

  Act forward(const Act& x, const QuantPolicy& qp) {
    cache = Cache{};
    cache.in = x;
    cache.valid = true;
    Act y = x;
    for (auto& u : units) y = u.forward(y, qp);
    Act s = x;
    if (has_projection) {
      if (qp.enabled) {
        s = Act::from_q(qp.q_a1(conv2d(x.q, qp.q_w(proj_w), proj_spec)));
      } else {
        s = Act::from_real(conv2d(x.real, proj_w.value, proj_spec));
      }
    }
    Tensor sum = add(y.real, s.real);
    if (qp.enabled) {
      // Both addends sit on the k_a grid; the sum stays on it exactly.
      return Act::from_q(QTensor::from_grid_exact(sum, qp.cfg.k_a.grid_exp(), 0,
                                                  qp.cfg.k_a.k));
    }
    return Act::from_real(std::move(sum));
  }

  Tensor backward(const Tensor& e, const QuantPolicy& qp) {
    EOQ_CHECK(cache.valid, "backward before forward");
    Tensor eb = e;
    for (auto it = units.rbegin(); it != units.rend(); ++it)
      eb = it->backward(eb, qp);
    Tensor es = e;
    if (has_projection) {
      if (qp.enabled) {
        const QTensor eq = qp.q_e(e);
        const ConvGrads cg = conv2d_backward(eq, cache.in.q, proj_w.q, proj_spec);
        proj_w.grad = qp.q_g(cg.g_w).dequantize();
        es = qp.q_e(cg.e_in).dequantize();
      } else {
        const ConvGrads cg = conv2d_backward(e, cache.in.real, proj_w.value, proj_spec);
        proj_w.grad = cg.g_w;
        es = cg.e_in;
      }
    }
    cache.valid = false;
    // Skip-path errors join branch errors in real precision.
    return add(eb, es);
  }
};

/// Stem conv: conv -> Q_a1 -> relu -> Q_a2 puts the trunk on the k_a grid.
struct StemLayer {
  Param w;
  ConvSpec spec;

  struct Cache {
    bool valid = false;
    Act in;
    Tensor pre_relu;
  } cache;

  Act forward(const Act& x, const QuantPolicy& qp) {
    cache = Cache{};
    cache.in = x;
    if (qp.enabled) {
      const QTensor x2q = qp.q_a1(conv2d(x.q, qp.q_w(w), spec));
      cache.pre_relu = x2q.dequantize();
      cache.valid = true;
      return Act::from_q(qp.q_a2(relu(cache.pre_relu)));
    }
    cache.pre_relu = conv2d(x.real, w.value, spec);
    cache.valid = true;
    return Act::from_real(relu(cache.pre_relu));
  }

  void backward(const Tensor& e, const QuantPolicy& qp) {
    EOQ_CHECK(cache.valid, "backward before forward");
    if (qp.enabled) {
      const Tensor e_a2 = ste_quantizer_backward(e, relu(cache.pre_relu),
                                                 QuantKind::clamp, qp.cfg.k_a);
      const Tensor e1 = relu_backward(e_a2, cache.pre_relu);
      const QTensor eq = qp.q_e(e1);
      const ConvGrads cg = conv2d_backward(eq, cache.in.q, w.q, spec);
      w.grad = qp.q_g(cg.g_w).dequantize();
    } else {
      const Tensor e1 = relu_backward(e, cache.pre_relu);
      const ConvGrads cg = conv2d_backward(e1, cache.in.real, w.value, spec);
      w.grad = cg.g_w;
    }
    cache.valid = false;
  }
};

// ---------------------------------------------------------------------------
// Batch-normalized reference baseline (real precision only).
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over (N, H, W) with learnable affine.
struct BNLayer {
  Param gamma, beta;                // shape (C)
  Tensor running_mean, running_var; // shape (C)
  double eps = 1e-5;
  double momentum = 0.1;

  struct Cache {
    bool valid = false;
    Tensor xhat;
    Tensor x_minus_mu;
    std::vector<double> inv_std;
    std::int64_t count = 0;
  } cache;

  explicit BNLayer(std::int64_t C = 0) { init(C); }

  void init(std::int64_t C) {
    gamma = Param("bn.gamma", Tensor::full({C}, 1.0));
    beta = Param("bn.beta", Tensor({C}));
    running_mean = Tensor({C});
    running_var = Tensor::full({C}, 1.0);
  }

  Tensor forward(const Tensor& x, bool training) {
    EOQ_CHECK(x.shape.size() == 4, "bn: expected 4-D input");
    const std::int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    EOQ_CHECK(N >= 1, "bn: batch size must be >= 1");
    Tensor out(x.shape);
    if (training) {
      trace::record_bn_stats();
      cache = Cache{};
      cache.xhat = Tensor(x.shape);
      cache.x_minus_mu = Tensor(x.shape);
      cache.inv_std.resize(static_cast<std::size_t>(C));
      cache.count = N * HW;
      for (std::int64_t c = 0; c < C; ++c) {
        double mu = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = x.data.data() + (n * C + c) * HW;
          for (std::int64_t j = 0; j < HW; ++j) mu += p[j];
        }
        mu /= static_cast<double>(N * HW);
        double var = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = x.data.data() + (n * C + c) * HW;
          for (std::int64_t j = 0; j < HW; ++j) var += (p[j] - mu) * (p[j] - mu);
        }
        var /= static_cast<double>(N * HW);
        const double istd = 1.0 / std::sqrt(var + eps);
        cache.inv_std[static_cast<std::size_t>(c)] = istd;
        const double g = gamma.value[c], b = beta.value[c];
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = x.data.data() + (n * C + c) * HW;
          double* xm = cache.x_minus_mu.data.data() + (n * C + c) * HW;
          double* xh = cache.xhat.data.data() + (n * C + c) * HW;
          double* o = out.data.data() + (n * C + c) * HW;
          for (std::int64_t j = 0; j < HW; ++j) {
            xm[j] = p[j] - mu;
            xh[j] = xm[j] * istd;
            o[j] = g * xh[j] + b;
          }
        }
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
      }
      cache.valid = true;
    } else {
      for (std::int64_t c = 0; c < C; ++c) {
        const double istd = 1.0 / std::sqrt(running_var[c] + eps);
        const double g = gamma.value[c], b = beta.value[c];
        const double mu = running_mean[c];
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = x.data.data() + (n * C + c) * HW;
          double* o = out.data.data() + (n * C + c) * HW;
          for (std::int64_t j = 0; j < HW; ++j) o[j] = g * (p[j] - mu) * istd + b;
        }
      }
    }
    return out;
  }

  /// Full batch-statistics chain rule (training mode).
  Tensor backward(const Tensor& e) {
    EOQ_CHECK(cache.valid, "backward before forward");
    trace::record_bn_stats();
    const std::int64_t N = e.shape[0], C = e.shape[1], HW = e.shape[2] * e.shape[3];
    const double cnt = static_cast<double>(cache.count);
    Tensor out(e.shape);
    gamma.grad = Tensor({C});
    beta.grad = Tensor({C});
    for (std::int64_t c = 0; c < C; ++c) {
      const double g = gamma.value[c];
      const double istd = cache.inv_std[static_cast<std::size_t>(c)];
      double dg = 0.0, db = 0.0, sum_exhat = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double* ep = e.data.data() + (n * C + c) * HW;
        const double* xh = cache.xhat.data.data() + (n * C + c) * HW;
        for (std::int64_t j = 0; j < HW; ++j) {
          dg += ep[j] * xh[j];
          db += ep[j];
          sum_exhat += ep[j] * xh[j];
        }
      }
      gamma.grad[c] = dg;
      beta.grad[c] = db;
      // dx = (g*istd/cnt) * (cnt*e - sum(e) - xhat * sum(e*xhat))
      for (std::int64_t n = 0; n < N; ++n) {
        const double* ep = e.data.data() + (n * C + c) * HW;
        const double* xh = cache.xhat.data.data() + (n * C + c) * HW;
        double* o = out.data.data() + (n * C + c) * HW;
        for (std::int64_t j = 0; j < HW; ++j)
          o[j] = g * istd / cnt * (cnt * ep[j] - db - xh[j] * sum_exhat);
      }
    }
    cache.valid = false;
    return out;
  }
};

/// conv -> BN -> relu unit of the baseline network.
struct BNUnit {
  Param w;
  ConvSpec spec;
  BNLayer bn;

  struct Cache {
    bool valid = false;
    Tensor in;
    Tensor bn_out;
  } cache;

  Tensor forward(const Tensor& x, bool training) {
    cache = Cache{};
    cache.in = x;
    Tensor y = bn.forward(conv2d(x, w.value, spec), training);
    Tensor out = relu(y);
    cache.bn_out = std::move(y);
    cache.valid = true;
    return out;
  }

  Tensor backward(const Tensor& e) {
    EOQ_CHECK(cache.valid, "backward before forward");
    const Tensor ez = bn.backward(relu_backward(e, cache.bn_out));
    const ConvGrads cg = conv2d_backward(ez, cache.in, w.value, spec);
    w.grad = cg.g_w;
    cache.valid = false;
    return cg.e_in;
  }
};

// ---------------------------------------------------------------------------
// Full models.
// ---------------------------------------------------------------------------

struct FixupArch {
  std::int64_t blocks_per_stage = 3;
  std::vector<std::int64_t> channels = {16, 32, 64};
  std::int64_t in_channels = 3;
  std::int64_t classes = 10;
  std::int64_t branch_depth = 2; // m
  std::int64_t image_size = 32;

  std::int64_t total_blocks() const {
    return blocks_per_stage * static_cast<std::int64_t>(channels.size());
  }
};

/// Common model interface for the training harness.
struct Model {
  virtual ~Model() = default;
  virtual Tensor forward(const Tensor& images, bool training) = 0;
  virtual void backward(const Tensor& e_logits) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
  virtual bool quantized() const = 0;
  virtual BitWidthConfig bitwidths() const = 0;
  virtual const FixupArch& arch() const = 0;
};

/// Fixup residual network; quantized (EOQ) or float depending on policy.
class FixupNet : public Model {
 public:
  FixupNet(FixupArch a, bool quantize, BitWidthConfig cfg)
      : arch_(std::move(a)), policy_{quantize, cfg} {
    build();
  }

  /// Kaiming init everywhere; residual-branch weights additionally scaled by
  /// L^(-1/(2m-2)); gamma = 1 and b = 0 on their grids.
  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    const double alpha = fixup_scale(arch_.total_blocks(), arch_.branch_depth);
    {
      const std::int64_t fan = stem_.spec.in_channels * stem_.spec.kernel_size *
                               stem_.spec.kernel_size;
      stem_.w.assign(kaiming_init(stem_.spec.weight_shape(), fan, rng));
    }
    for (auto& rb : blocks_) {
      for (auto& u : rb.units) {
        const std::int64_t fan =
            u.spec.in_channels * u.spec.kernel_size * u.spec.kernel_size;
        Tensor wt = kaiming_init(u.spec.weight_shape(), fan, rng);
        for (auto& v : wt.data) v *= alpha;
        u.w.assign(wt);
        u.b1.assign(Tensor::scalar(0.0));
        u.b2.assign(Tensor::scalar(0.0));
        u.gamma.assign(Tensor::scalar(1.0));
      }
      if (rb.has_projection) {
        const std::int64_t fan = rb.proj_spec.in_channels;
        rb.proj_w.assign(kaiming_init(rb.proj_spec.weight_shape(), fan, rng));
      }
    }
    const std::int64_t feat = arch_.channels.back();
    head_w_.assign(kaiming_init({arch_.classes, feat}, feat, rng));
    head_b_.assign(Tensor({arch_.classes}));
  }

  Tensor forward(const Tensor& images, bool /*training*/) override {
    Act a = policy_.enabled ? Act::from_q(policy_.q_a1(images))
                            : Act::from_real(images);
    a = stem_.forward(a, policy_);
    for (auto& rb : blocks_) a = rb.forward(a, policy_);
    trunk_shape_ = a.real.shape;
    pooled_ = global_avg_pool(a.real);
    Tensor logits = linear(pooled_, head_w_.value);
    const std::int64_t N = logits.shape[0], C = logits.shape[1];
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) logits[n * C + c] += head_b_.value[c];
    head_valid_ = true;
    return logits;
  }

  void backward(const Tensor& e_logits) override {
    EOQ_CHECK(head_valid_, "backward before forward");
    const std::int64_t N = e_logits.shape[0], C = e_logits.shape[1];
    head_b_.grad = Tensor({C});
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) head_b_.grad[c] += e_logits[n * C + c];
    const LinearGrads lg = linear_backward(e_logits, pooled_, head_w_.value);
    head_w_.grad = lg.g_w;
    Tensor e = global_avg_pool_backward(lg.e_in, trunk_shape_);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it)
      e = it->backward(e, policy_);
    stem_.backward(e, policy_);
    head_valid_ = false;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out{&stem_.w};
    for (auto& rb : blocks_) {
      for (auto& u : rb.units) {
        out.push_back(&u.w);
        out.push_back(&u.b1);
        out.push_back(&u.b2);
        out.push_back(&u.gamma);
      }
      if (rb.has_projection) out.push_back(&rb.proj_w);
    }
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
  }

  bool quantized() const override { return policy_.enabled; }
  BitWidthConfig bitwidths() const override { return policy_.cfg; }
  const FixupArch& arch() const override { return arch_; }

  std::vector<ResidualBlock>& residual_blocks() { return blocks_; }
  StemLayer& stem() { return stem_; }
  const QuantPolicy& policy() const { return policy_; }

 private:
  void build() {
    stem_.spec = ConvSpec{arch_.in_channels, arch_.channels[0], 3, 1, 1};
    stem_.w = make_weight("stem.w", stem_.spec);
    std::int64_t block_index = 0;
    for (std::size_t s = 0; s < arch_.channels.size(); ++s) {
      const std::int64_t cin = s == 0 ? arch_.channels[0] : arch_.channels[s - 1];
      const std::int64_t cout = arch_.channels[s];
      for (std::int64_t b = 0; b < arch_.blocks_per_stage; ++b) {
        ResidualBlock rb;
        const bool transition = (s > 0 && b == 0);
        const std::int64_t stride = transition ? 2 : 1;
        const std::int64_t in_ch = (b == 0) ? cin : cout;
        for (std::int64_t u = 0; u < arch_.branch_depth; ++u) {
          FixupUnit unit;
          unit.block_index = block_index;
          unit.branch_depth = arch_.branch_depth;
          unit.spec = ConvSpec{u == 0 ? in_ch : cout, cout, 3,
                               u == 0 ? stride : 1, 1};
          const std::string base = "block" + std::to_string(block_index) +
                                   ".unit" + std::to_string(u);
          unit.w = make_weight(base + ".w", unit.spec);
          unit.b1 = make_scalar(base + ".b1", policy_.cfg.k_b.k);
          unit.b2 = make_scalar(base + ".b2", policy_.cfg.k_b.k);
          unit.gamma = make_scalar(base + ".gamma", policy_.cfg.k_gamma.k);
          rb.units.push_back(std::move(unit));
        }
        if (in_ch != cout || stride != 1) {
          rb.has_projection = true;
          rb.proj_spec = ConvSpec{in_ch, cout, 1, stride, 0};
          rb.proj_w = make_weight("block" + std::to_string(block_index) + ".proj.w",
                                  rb.proj_spec);
        }
        blocks_.push_back(std::move(rb));
        ++block_index;
      }
    }
    head_w_ = Param("head.w", Tensor({arch_.classes, arch_.channels.back()}));
    head_b_ = Param("head.b", Tensor({arch_.classes}));
  }

  Param make_weight(const std::string& name, const ConvSpec& sp) {
    Param p(name, Tensor(sp.weight_shape()));
    if (policy_.enabled) p.set_storage(ParamStorage::clamp_grid, policy_.cfg.k_w.k);
    return p;
  }
  Param make_scalar(const std::string& name, int bits) {
    Param p(name, Tensor::scalar(0.0));
    if (policy_.enabled) p.set_storage(ParamStorage::basic_grid, bits);
    return p;
  }

  FixupArch arch_;
  QuantPolicy policy_;
  StemLayer stem_;
  std::vector<ResidualBlock> blocks_;
  Param head_w_, head_b_;
  Tensor pooled_;
  Shape trunk_shape_;
  bool head_valid_ = false;
};

/// Same topology with conv -> BN -> relu units; float precision only.
class BNNet : public Model {
 public:
  explicit BNNet(FixupArch a) : arch_(std::move(a)) { build(); }

  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    const std::int64_t sfan = stem_.spec.in_channels * 9;
    stem_.w.assign(kaiming_init(stem_.spec.weight_shape(), sfan, rng));
    stem_bn_.init(arch_.channels[0]);
    for (auto& rb : blocks_) {
      for (auto& u : rb.units) {
        const std::int64_t fan =
            u.spec.in_channels * u.spec.kernel_size * u.spec.kernel_size;
        u.w.assign(kaiming_init(u.spec.weight_shape(), fan, rng));
        u.bn.init(u.spec.out_channels);
      }
      if (rb.has_projection) {
        rb.proj_w.assign(kaiming_init(rb.proj_spec.weight_shape(),
                                      rb.proj_spec.in_channels, rng));
        rb.proj_bn.init(rb.proj_spec.out_channels);
      }
    }
    const std::int64_t feat = arch_.channels.back();
    head_w_.assign(kaiming_init({arch_.classes, feat}, feat, rng));
    head_b_.assign(Tensor({arch_.classes}));
  }

  Tensor forward(const Tensor& images, bool training) override {
    Tensor a = relu(stem_bn_.forward(conv2d(images, stem_.w.value, stem_.spec), training));
    stem_cache_in_ = images;
    stem_cache_out_ = a;
    for (auto& rb : blocks_) a = rb.forward(a, training);
    trunk_shape_ = a.shape;
    pooled_ = global_avg_pool(a);
    Tensor logits = linear(pooled_, head_w_.value);
    const std::int64_t N = logits.shape[0], C = logits.shape[1];
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) logits[n * C + c] += head_b_.value[c];
    head_valid_ = true;
    return logits;
  }

  void backward(const Tensor& e_logits) override {
    EOQ_CHECK(head_valid_, "backward before forward");
    const std::int64_t N = e_logits.shape[0], C = e_logits.shape[1];
    head_b_.grad = Tensor({C});
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) head_b_.grad[c] += e_logits[n * C + c];
    const LinearGrads lg = linear_backward(e_logits, pooled_, head_w_.value);
    head_w_.grad = lg.g_w;
    Tensor e = global_avg_pool_backward(lg.e_in, trunk_shape_);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it)
      e = it->backward(e);
    const Tensor ez = stem_bn_.backward(relu_backward(e, stem_cache_out_));
    // relu mask above uses the post-relu activation: relu' == 1 iff out > 0.
    const ConvGrads cg = conv2d_backward(ez, stem_cache_in_, stem_.w.value, stem_.spec);
    stem_.w.grad = cg.g_w;
    head_valid_ = false;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out{&stem_.w, &stem_bn_.gamma, &stem_bn_.beta};
    for (auto& rb : blocks_) {
      for (auto& u : rb.units) {
        out.push_back(&u.w);
        out.push_back(&u.bn.gamma);
        out.push_back(&u.bn.beta);
      }
      if (rb.has_projection) {
        out.push_back(&rb.proj_w);
        out.push_back(&rb.proj_bn.gamma);
        out.push_back(&rb.proj_bn.beta);
      }
    }
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> buffers() override {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("stem.bn.rmean", &stem_bn_.running_mean);
    out.emplace_back("stem.bn.rvar", &stem_bn_.running_var);
    std::int64_t i = 0;
    for (auto& rb : blocks_) {
      std::int64_t u_i = 0;
      for (auto& u : rb.units) {
        const std::string base =
            "block" + std::to_string(i) + ".unit" + std::to_string(u_i);
        out.emplace_back(base + ".bn.rmean", &u.bn.running_mean);
        out.emplace_back(base + ".bn.rvar", &u.bn.running_var);
        ++u_i;
      }
      if (rb.has_projection) {
        const std::string base = "block" + std::to_string(i) + ".proj";
        out.emplace_back(base + ".bn.rmean", &rb.proj_bn.running_mean);
        out.emplace_back(base + ".bn.rvar", &rb.proj_bn.running_var);
      }
      ++i;
    }
    return out;
  }

  bool quantized() const override { return false; }
  BitWidthConfig bitwidths() const override { return BitWidthConfig::all8(); }
  const FixupArch& arch() const override { return arch_; }

  struct BNResidualBlock {
    std::vector<BNUnit> units;
    bool has_projection = false;
    Param proj_w;
    ConvSpec proj_spec;
    BNLayer proj_bn;
    Tensor cache_in;
    bool cache_valid = false;

    Tensor forward(const Tensor& x, bool training) {
      cache_in = x;
      cache_valid = true;
      Tensor y = x;
      for (auto& u : units) y = u.forward(y, training);
      Tensor s = x;
      if (has_projection)
        s = proj_bn.forward(conv2d(x, proj_w.value, proj_spec), training);
      return add(y, s);
    }
    Tensor backward(const Tensor& e) {
      EOQ_CHECK(cache_valid, "backward before forward");
      Tensor eb = e;
      for (auto it = units.rbegin(); it != units.rend(); ++it) eb = it->backward(eb);
      Tensor es = e;
      if (has_projection) {
        const Tensor ez = proj_bn.backward(e);
        const ConvGrads cg = conv2d_backward(ez, cache_in, proj_w.value, proj_spec);
        proj_w.grad = cg.g_w;
        es = cg.e_in;
      }
      cache_valid = false;
      return add(eb, es);
    }
  };

  std::vector<BNResidualBlock>& residual_blocks() { return blocks_; }

 private:
  void build() {
    stem_.spec = ConvSpec{arch_.in_channels, arch_.channels[0], 3, 1, 1};
    stem_.w = Param("stem.w", Tensor(stem_.spec.weight_shape()));
    stem_bn_.init(arch_.channels[0]);
    stem_bn_.gamma.name = "stem.bn.gamma";
    stem_bn_.beta.name = "stem.bn.beta";
    std::int64_t block_index = 0;
    for (std::size_t s = 0; s < arch_.channels.size(); ++s) {
      const std::int64_t cin = s == 0 ? arch_.channels[0] : arch_.channels[s - 1];
      const std::int64_t cout = arch_.channels[s];
      for (std::int64_t b = 0; b < arch_.blocks_per_stage; ++b) {
        BNResidualBlock rb;
        const bool transition = (s > 0 && b == 0);
        const std::int64_t stride = transition ? 2 : 1;
        const std::int64_t in_ch = (b == 0) ? cin : cout;
        for (std::int64_t u = 0; u < arch_.branch_depth; ++u) {
          BNUnit unit;
          unit.spec = ConvSpec{u == 0 ? in_ch : cout, cout, 3, u == 0 ? stride : 1, 1};
          const std::string base = "block" + std::to_string(block_index) +
                                   ".unit" + std::to_string(u);
          unit.w = Param(base + ".w", Tensor(unit.spec.weight_shape()));
          unit.bn.init(cout);
          unit.bn.gamma.name = base + ".bn.gamma";
          unit.bn.beta.name = base + ".bn.beta";
          rb.units.push_back(std::move(unit));
        }
        if (in_ch != cout || stride != 1) {
          rb.has_projection = true;
          rb.proj_spec = ConvSpec{in_ch, cout, 1, stride, 0};
          rb.proj_w = Param("block" + std::to_string(block_index) + ".proj.w",
                            Tensor(rb.proj_spec.weight_shape()));
          rb.proj_bn.init(cout);
          rb.proj_bn.gamma.name = "block" + std::to_string(block_index) + ".proj.bn.gamma";
          rb.proj_bn.beta.name = "block" + std::to_string(block_index) + ".proj.bn.beta";
        }
        blocks_.push_back(std::move(rb));
        ++block_index;
      }
    }
    head_w_ = Param("head.w", Tensor({arch_.classes, arch_.channels.back()}));
    head_b_ = Param("head.b", Tensor({arch_.classes}));
  }

  FixupArch arch_;
  StemLayer stem_; // only .w/.spec used; quantizer-free path
  BNLayer stem_bn_;
  std::vector<BNResidualBlock> blocks_;
  Param head_w_, head_b_;
  Tensor pooled_, stem_cache_in_, stem_cache_out_;
  Shape trunk_shape_;
  bool head_valid_ = false;
};

} // namespace eoq
