#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "eoq/quant.hpp"
#include "eoq/rng.hpp"
#include "oracle.hpp"

using namespace eoq;

namespace {
Tensor t1(std::initializer_list<double> v) {
  return Tensor({static_cast<std::int64_t>(v.size())}, std::vector<double>(v));
}
} // namespace

TEST_CASE("round_nearest basics and ties away from zero") {
  CHECK(round_nearest(0.0) == 0);
  CHECK(round_nearest(0.6) == 1);
  CHECK(round_nearest(-0.6) == -1);
  CHECK(round_nearest(0.5) == 1);
  CHECK(round_nearest(-1.5) == -2);
  CHECK(round_nearest(2.5) == 3);
  CHECK_THROWS_AS(round_nearest(std::numeric_limits<double>::infinity()), eoq::error);
  CHECK_THROWS_AS(round_nearest(std::nan("")), eoq::error);
}

TEST_CASE("basic_quant matches Eq. 5 hand evaluations") {
  auto q0 = basic_quant(t1({0.0}), BitWidth(5));
  CHECK(q0.numerators[0] == 0);
  CHECK(q0.value(0) == 0.0);

  auto q2 = basic_quant(t1({0.3}), BitWidth(2));
  CHECK(q2.numerators[0] == 1); // R(0.6) = 1
  CHECK(q2.value(0) == 0.5);

  auto q8 = basic_quant(t1({0.3}), BitWidth(8));
  CHECK(q8.numerators[0] == 38);
  CHECK(q8.value(0) == 0.296875);

  CHECK_THROWS_WITH(basic_quant(t1({1e9}), BitWidth(16)),
                    Catch::Matchers::ContainsSubstring("numerator overflow"));
  CHECK_THROWS_WITH(basic_quant(t1({std::nan("")}), BitWidth(8)),
                    Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("clamp_quant clamps to the Eq. 6 range") {
  auto hi = clamp_quant(t1({1.7}), BitWidth(8));
  CHECK(hi.numerators[0] == 127);
  CHECK(hi.value(0) == 0.9921875);

  auto lo = clamp_quant(t1({-5.0}), BitWidth(4));
  CHECK(lo.numerators[0] == -7);
  CHECK(lo.value(0) == -0.875);

  auto mid = clamp_quant(t1({0.5}), BitWidth(8));
  CHECK(mid.value(0) == 0.5);
}

TEST_CASE("pow2_scale rounds log2 of the max magnitude") {
  CHECK(pow2_scale(t1({0.3, -0.1})) == -2);
  CHECK(pow2_scale(t1({1.0})) == 0);
  CHECK(pow2_scale(t1({6.0, 1.0})) == 3);
  CHECK(pow2_scale(t1({0.0, 0.0})) == 0); // defined, no error
}

TEST_CASE("scale_quant matches Eq. 7 hand evaluations") {
  auto q = scale_quant(t1({0.3, -0.1}), BitWidth(8));
  CHECK(q.scale_exp == -2);
  CHECK(q.numerators[0] == 127); // 0.3/0.25 = 1.2 clamps
  CHECK(q.value(0) == 0.248046875);
  CHECK(q.numerators[1] == -51);
  CHECK(q.value(1) == -0.099609375);

  auto h = scale_quant(t1({0.5}), BitWidth(8));
  CHECK(h.scale_exp == -1);
  CHECK(h.value(0) == 0.49609375); // max element lands on the clamp bound

  auto z = scale_quant(t1({0.0, 0.0, 0.0}), BitWidth(8));
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z.value(i) == 0.0);
}

TEST_CASE("dequantize applies numerator * 2^(scale_exp - grid_exp)") {
  QTensor q({1}, 7, 0, 8);
  q.numerators[0] = 1;
  CHECK(q.dequantize()[0] == 1.0 / 128.0);
  q.scale_exp = -2;
  q.numerators[0] = -127;
  CHECK(q.dequantize()[0] == -0.248046875);
  q.numerators[0] = 0;
  CHECK(q.dequantize()[0] == 0.0);
}

TEST_CASE("from_grid_exact accepts on-grid values and rejects others") {
  auto q = QTensor::from_grid_exact(t1({0.5, -0.25, 3.0}), 7, 0, 8);
  CHECK(q.numerators[0] == 64);
  CHECK(q.numerators[1] == -32);
  CHECK(q.numerators[2] == 384);
  CHECK_THROWS_WITH(QTensor::from_grid_exact(t1({0.3}), 7, 0, 8),
                    Catch::Matchers::ContainsSubstring("off quantization grid"));
}

TEST_CASE("quantizer properties: idempotence, oddness, monotonicity, range, error bound") {
  Rng rng(20240811);
  const int ks[4] = {2, 4, 8, 16};
  for (int rep = 0; rep < 10000; ++rep) {
    const BitWidth k(ks[rep % 4]);
    const double x = rng.uniform(-4.0, 4.0);
    const double y = rng.uniform(-4.0, 4.0);
    const Tensor tx = t1({x}), ty = t1({y});

    // Idempotence on the quantized value.
    auto qx = basic_quant(tx, k);
    CHECK(basic_quant(qx.dequantize(), k).numerators[0] == qx.numerators[0]);
    auto cx = clamp_quant(tx, k);
    CHECK(clamp_quant(cx.dequantize(), k).numerators[0] == cx.numerators[0]);

    // Oddness.
    CHECK(basic_quant(t1({-x}), k).numerators[0] == -qx.numerators[0]);
    CHECK(clamp_quant(t1({-x}), k).numerators[0] == -cx.numerators[0]);

    // Monotonicity.
    const double lo = std::min(x, y), hi = std::max(x, y);
    CHECK(basic_quant(t1({lo}), k).value(0) <= basic_quant(t1({hi}), k).value(0));

    // Clamp range.
    const double bound = 1.0 - std::ldexp(1.0, -(k.k - 1));
    CHECK(std::abs(cx.value(0)) <= bound);

    // Error bound within the representable range.
    CHECK(std::abs(qx.value(0) - x) <= std::ldexp(1.0, -k.k));
  }
}

TEST_CASE("oddness holds at exact grid midpoints") {
  for (int k = 2; k <= 16; k += 2) {
    const double step = std::ldexp(1.0, -(k - 1));
    for (int n = -5; n <= 5; ++n) {
      const double x = (static_cast<double>(n) + 0.5) * step;
      CHECK(basic_quant(t1({x}), BitWidth(k)).numerators[0] ==
            -basic_quant(t1({-x}), BitWidth(k)).numerators[0]);
    }
  }
}

TEST_CASE("scale_quant outputs are dyadic with integer scale") {
  Rng rng(7);
  for (int rep = 0; rep < 2000; ++rep) {
    const int k = 2 + static_cast<int>(rng.uniform_index(15));
    Tensor x({4});
    for (int i = 0; i < 4; ++i) x[i] = rng.uniform(-8.0, 8.0) * std::exp(rng.uniform(-20.0, 3.0));
    auto q = scale_quant(x, BitWidth(k));
    for (std::int64_t i = 0; i < q.size(); ++i) {
      CHECK(std::abs(q.numerators[i]) <= BitWidth(k).clamp_limit());
      CHECK(q.value(i) == std::ldexp(static_cast<double>(q.numerators[i]),
                                     q.scale_exp - q.grid_exp));
    }
  }
}

TEST_CASE("quantizers agree with the exact-rational oracle") {
  Rng rng(123456);
  const int ks[4] = {2, 4, 8, 16};
  for (int rep = 0; rep < 20000; ++rep) {
    const int k = ks[rep % 4];
    const double x = rng.uniform(-4.0, 4.0);
    const Tensor tx = t1({x});
    CHECK(basic_quant(tx, BitWidth(k)).numerators[0] == qoracle::q_num(x, k));
    CHECK(clamp_quant(tx, BitWidth(k)).numerators[0] == qoracle::cq_num(x, k));
    const int s = qoracle::scale_exp_exact(std::abs(x));
    auto sq = scale_quant(tx, BitWidth(k));
    CHECK(sq.scale_exp == s);
    CHECK(sq.numerators[0] == qoracle::sq_num(x, k, s));
    CHECK(sq.value(0) == qoracle::sq_value(x, k, s));
  }
}

TEST_CASE("BitWidth and BitWidthConfig validate bounds") {
  CHECK_THROWS_AS(BitWidth(1), eoq::error);
  CHECK_THROWS_AS(BitWidth(17), eoq::error);
  auto cfg = BitWidthConfig::all8();
  CHECK(cfg.k_w.k == 8);
  CHECK(cfg == BitWidthConfig::uniform(8));
}
