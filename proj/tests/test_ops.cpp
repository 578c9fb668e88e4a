#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <omp.h>

#include "eoq/ops.hpp"
#include "eoq/rng.hpp"

using namespace eoq;

namespace {

// Independent direct-loop reference for cross-correlation.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const ConvSpec& sp) {
  const std::int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
  const std::int64_t Ho = sp.out_dim(H), Wo = sp.out_dim(W);
  Tensor out({N, sp.out_channels, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < sp.out_channels; ++co)
      for (std::int64_t ho = 0; ho < Ho; ++ho)
        for (std::int64_t wo = 0; wo < Wo; ++wo) {
          double s = 0.0;
          for (std::int64_t ci = 0; ci < sp.in_channels; ++ci)
            for (std::int64_t kr = 0; kr < sp.kernel_size; ++kr)
              for (std::int64_t kc = 0; kc < sp.kernel_size; ++kc) {
                const std::int64_t h = ho * sp.stride - sp.padding + kr;
                const std::int64_t ww = wo * sp.stride - sp.padding + kc;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                s += x.at4(n, ci, h, ww) *
                     w.data[static_cast<std::size_t>(
                         ((co * sp.in_channels + ci) * sp.kernel_size + kr) *
                             sp.kernel_size + kc)];
              }
          out.at4(n, co, ho, wo) = s;
        }
  return out;
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double m = std::max(std::abs(a), std::abs(b));
  return m > 1e-12 ? d / m : d;
}

} // namespace

TEST_CASE("conv2d identity and hand-computed cases") {
  ConvSpec id{1, 1, 1, 1, 0};
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w1({1, 1, 1, 1}, {1.0});
  auto out = conv2d(x, w1, id);
  CHECK(out.data == x.data);

  ConvSpec sp{1, 1, 2, 1, 0};
  Tensor w({1, 1, 2, 2}, {1, 0, 0, 1});
  auto y = conv2d(x, w, sp);
  REQUIRE(y.shape == Shape({1, 1, 1, 1}));
  CHECK(y[0] == 5.0);

  Tensor wz({1, 1, 2, 2}, {0, 0, 0, 0});
  auto z = conv2d(x, wz, sp);
  CHECK(z[0] == 0.0);
}

TEST_CASE("conv2d agrees with the naive reference across geometries") {
  Rng rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    ConvSpec sp;
    sp.in_channels = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    sp.out_channels = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
    sp.kernel_size = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    sp.stride = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    sp.padding = static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t H = sp.kernel_size + static_cast<std::int64_t>(rng.uniform_index(5));
    auto x = random_tensor({2, sp.in_channels, H, H}, rng);
    auto w = random_tensor(sp.weight_shape(), rng);
    auto a = conv2d(x, w, sp);
    auto b = naive_conv2d(x, w, sp);
    REQUIRE(a.shape == b.shape);
    for (std::int64_t i = 0; i < a.size(); ++i)
      CHECK_THAT(a[i], Catch::Matchers::WithinAbs(b[i], 1e-12));
  }
}

TEST_CASE("conv2d_backward trivial cases") {
  ConvSpec sp{1, 1, 2, 1, 0};
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w({1, 1, 2, 2}, {1, 0, 0, 1});

  auto g0 = conv2d_backward(Tensor({1, 1, 1, 1}), x, w, sp);
  for (auto v : g0.e_in.data) CHECK(v == 0.0);
  for (auto v : g0.g_w.data) CHECK(v == 0.0);

  ConvSpec id{1, 1, 1, 1, 0};
  Tensor wid({1, 1, 1, 1}, {1.0});
  Tensor e({1, 1, 2, 2}, {5, 6, 7, 8});
  auto gi = conv2d_backward(e, x, wid, id);
  CHECK(gi.e_in.data == e.data);

  Tensor e1({1, 1, 1, 1}, {1.0});
  auto g = conv2d_backward(e1, x, w, sp);
  CHECK(g.g_w.data == std::vector<double>({1, 2, 3, 4}));
}

TEST_CASE("conv2d_backward matches central finite differences") {
  Rng rng(7);
  ConvSpec sp{2, 3, 3, 1, 1};
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto w = random_tensor(sp.weight_shape(), rng);
  auto cot = random_tensor({1, 3, 4, 4}, rng); // random cotangent
  auto g = conv2d_backward(cot, x, w, sp);

  const double h = 1e-4;
  auto loss = [&](const Tensor& xx, const Tensor& ww) {
    auto out = conv2d(xx, ww, sp);
    double s = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * cot[i];
    return s;
  };
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss(xp, w) - loss(xm, w)) / (2 * h);
    CHECK(rel_err(fd, g.e_in[i]) <= 1e-5);
  }
  for (std::int64_t i = 0; i < w.size(); ++i) {
    Tensor wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    const double fd = (loss(x, wp) - loss(x, wm)) / (2 * h);
    CHECK(rel_err(fd, g.g_w[i]) <= 1e-5);
  }
}

TEST_CASE("strided conv backward matches finite differences") {
  Rng rng(9);
  ConvSpec sp{2, 2, 1, 2, 0}; // 1x1 stride-2 projection shape
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto w = random_tensor(sp.weight_shape(), rng);
  auto cot = random_tensor({1, 2, 2, 2}, rng);
  auto g = conv2d_backward(cot, x, w, sp);
  const double h = 1e-4;
  auto loss = [&](const Tensor& xx, const Tensor& ww) {
    auto out = conv2d(xx, ww, sp);
    double s = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * cot[i];
    return s;
  };
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(rel_err((loss(xp, w) - loss(xm, w)) / (2 * h), g.e_in[i]) <= 1e-5);
  }
  for (std::int64_t i = 0; i < w.size(); ++i) {
    Tensor wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    CHECK(rel_err((loss(x, wp) - loss(x, wm)) / (2 * h), g.g_w[i]) <= 1e-5);
  }
}

TEST_CASE("integer-MAC conv equals the real path exactly") {
  Rng rng(20210811);
  const int ks[4] = {2, 4, 8, 16};
  for (int rep = 0; rep < 30; ++rep) {
    ConvSpec sp;
    sp.in_channels = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    sp.out_channels = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    sp.kernel_size = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
    sp.stride = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
    sp.padding = static_cast<std::int64_t>(rng.uniform_index(2));
    const std::int64_t H = sp.kernel_size + 3;
    const BitWidth ka(ks[rep % 4]), kw(ks[(rep + 1) % 4]);
    auto xq = scale_quant(random_tensor({2, sp.in_channels, H, H}, rng, -3, 3), ka);
    auto wq = clamp_quant(random_tensor(sp.weight_shape(), rng), kw);
    auto viaint = conv2d(xq, wq, sp);
    auto viareal = conv2d(xq.dequantize(), wq.dequantize(), sp);
    REQUIRE(viaint.shape == viareal.shape);
    for (std::int64_t i = 0; i < viaint.size(); ++i)
      CHECK(viaint[i] == viareal[i]); // bit-exact
  }
}

TEST_CASE("integer-MAC conv backward equals the real path exactly") {
  Rng rng(77);
  for (int rep = 0; rep < 15; ++rep) {
    ConvSpec sp{2, 3, 3, 1, 1};
    auto xq = clamp_quant(random_tensor({2, 2, 5, 5}, rng), BitWidth(8));
    auto wq = clamp_quant(random_tensor(sp.weight_shape(), rng), BitWidth(8));
    auto eq = scale_quant(random_tensor({2, 3, 5, 5}, rng, -0.01, 0.01), BitWidth(8));
    auto gi = conv2d_backward(eq, xq, wq, sp);
    auto gr = conv2d_backward(eq.dequantize(), xq.dequantize(), wq.dequantize(), sp);
    for (std::int64_t i = 0; i < gi.e_in.size(); ++i) CHECK(gi.e_in[i] == gr.e_in[i]);
    for (std::int64_t i = 0; i < gi.g_w.size(); ++i) CHECK(gi.g_w[i] == gr.g_w[i]);
  }
}

TEST_CASE("integer-MAC linear equals the real path exactly") {
  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    auto xq = scale_quant(random_tensor({3, 17}, rng, -2, 2), BitWidth(8));
    auto wq = clamp_quant(random_tensor({5, 17}, rng), BitWidth(8));
    auto a = linear(xq, wq);
    auto b = linear(xq.dequantize(), wq.dequantize());
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("linear backward matches finite differences") {
  Rng rng(5);
  auto x = random_tensor({3, 7}, rng);
  auto w = random_tensor({4, 7}, rng);
  auto cot = random_tensor({3, 4}, rng);
  auto g = linear_backward(cot, x, w);
  const double h = 1e-4;
  auto loss = [&](const Tensor& xx, const Tensor& ww) {
    auto out = linear(xx, ww);
    double s = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * cot[i];
    return s;
  };
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(rel_err((loss(xp, w) - loss(xm, w)) / (2 * h), g.e_in[i]) <= 1e-5);
  }
  for (std::int64_t i = 0; i < w.size(); ++i) {
    Tensor wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    CHECK(rel_err((loss(x, wp) - loss(x, wm)) / (2 * h), g.g_w[i]) <= 1e-5);
  }
}

TEST_CASE("relu family") {
  Tensor x({4}, {-1.0, 2.0, 0.0, -0.5});
  auto y = relu(x);
  CHECK(y.data == std::vector<double>({0, 2, 0, 0}));
  Tensor e({4}, {1, 1, 1, 1});
  auto eb = relu_backward(e, x);
  CHECK(eb.data == std::vector<double>({0, 1, 0, 0})); // zero at x == 0
}

TEST_CASE("global_avg_pool of a constant map is the constant") {
  Tensor x = Tensor::full({2, 3, 4, 4}, 2.5);
  auto y = global_avg_pool(x);
  REQUIRE(y.shape == Shape({2, 3}));
  for (auto v : y.data) CHECK(v == 2.5);

  auto back = global_avg_pool_backward(Tensor({2, 3}, std::vector<double>(6, 16.0)),
                                       {2, 3, 4, 4});
  for (auto v : back.data) CHECK(v == 1.0);
}

TEST_CASE("softmax_xent closed forms") {
  const std::int64_t C = 10;
  Tensor uniform({2, C});
  auto r = softmax_xent(uniform, LabelBatch::plain({3, 7}));
  CHECK_THAT(r.loss, Catch::Matchers::WithinAbs(std::log(10.0), 1e-12));

  Tensor two({1, 2}, {10.0, 0.0});
  auto r2 = softmax_xent(two, LabelBatch::plain({0}));
  CHECK_THAT(r2.loss, Catch::Matchers::WithinAbs(std::log(1 + std::exp(-10.0)), 1e-12));

  // e_logits rows sum to zero for one-hot labels.
  Rng rng(3);
  Tensor logits = random_tensor({4, 6}, rng, -3, 3);
  auto r3 = softmax_xent(logits, LabelBatch::plain({0, 1, 2, 3}));
  for (std::int64_t n = 0; n < 4; ++n) {
    double s = 0.0;
    for (std::int64_t c = 0; c < 6; ++c) s += r3.e_logits[n * 6 + c];
    CHECK_THAT(s, Catch::Matchers::WithinAbs(0.0, 1e-15));
  }
  CHECK_THROWS_AS(softmax_xent(logits, LabelBatch::plain({0, 1, 2, 99})), eoq::error);
}

TEST_CASE("softmax_xent gradient matches finite differences, mixup included") {
  Rng rng(11);
  Tensor logits = random_tensor({3, 5}, rng, -2, 2);
  LabelBatch lb{{0, 2, 4}, {1, 3, 0}, 0.7};
  auto r = softmax_xent(logits, lb);
  const double h = 1e-5;
  for (std::int64_t i = 0; i < logits.size(); ++i) {
    Tensor lp = logits, lm = logits;
    lp[i] += h;
    lm[i] -= h;
    const double fd =
        (softmax_xent(lp, lb).loss - softmax_xent(lm, lb).loss) / (2 * h);
    CHECK(rel_err(fd, r.e_logits[i]) <= 1e-5);
  }
}

TEST_CASE("results are identical across thread counts") {
  Rng rng(100);
  ConvSpec sp{3, 4, 3, 1, 1};
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto w = random_tensor(sp.weight_shape(), rng);
  auto e = random_tensor({2, 4, 8, 8}, rng);

  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto f1 = conv2d(x, w, sp);
  auto g1 = conv2d_backward(e, x, w, sp);
  omp_set_num_threads(2);
  auto f2 = conv2d(x, w, sp);
  auto g2 = conv2d_backward(e, x, w, sp);
  omp_set_num_threads(saved);

  CHECK(f1.data == f2.data);
  CHECK(g1.e_in.data == g2.e_in.data);
  CHECK(g1.g_w.data == g2.g_w.data);
}

TEST_CASE("shape errors are reported") {
  ConvSpec sp{2, 1, 3, 1, 0};
  Tensor x({1, 1, 4, 4});
  Tensor w = Tensor(sp.weight_shape());
  CHECK_THROWS_AS(conv2d(x, w, sp), eoq::error);
  CHECK_THROWS_AS(linear(Tensor({2, 3}), Tensor({4, 5})), eoq::error);
}
