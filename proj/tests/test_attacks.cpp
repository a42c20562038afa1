#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vea/attacks.hpp"
#include "vea/ops.hpp"

using namespace vea;
using test::bitwise_equal;
using test::finite_difference_gradient;
using test::max_rel_error;
using test::random_tensor;
using test::to_vector;

TEST_CASE("attack config validation and derived step size") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.alpha() == doctest::Approx(3.0 * (16.0 / 255.0) / 10.0).epsilon(1e-15));
  cfg.ti_kernel_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.q = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("fgsm_step basics") {
  Rng rng(3);
  Tensor x = random_tensor({1, 1, 4, 4}, rng, 0.3, 0.7);
  const double eps = 16.0 / 255.0;
  PerturbationState st = PerturbationState::init(x, eps);

  // Zero gradient: sign(0) = 0 keeps the iterate fixed.
  PerturbationState same = fgsm_step(st, Tensor::zeros(x.shape()), 0.1);
  CHECK(bitwise_equal(same.x_adv, st.x_adv));
  CHECK(same.iteration == 1);

  // All-positive gradient with alpha = eps saturates the budget in one step.
  PerturbationState up = fgsm_step(st, Tensor::full(x.shape(), 2.5), eps);
  for (int64_t i = 0; i < x.numel(); ++i) {
    double expected = std::min(x.data()[i] + eps, 1.0);
    CHECK(up.x_adv.data()[i] == doctest::Approx(expected).epsilon(1e-15));
  }
}

TEST_CASE("projection binds exactly over 20 constant-gradient steps") {
  // Brute-force oracle: simulate the projected iteration directly.
  Rng rng(5);
  Tensor x = random_tensor({1, 1, 3, 3}, rng, 0.4, 0.6);
  const double eps = 0.05;
  PerturbationState st = PerturbationState::init(x, eps);
  Tensor grad = Tensor::full(x.shape(), 1.0);
  std::vector<double> oracle = to_vector(x);
  for (int step = 0; step < 20; ++step) {
    st = fgsm_step(st, grad, eps);
    for (size_t i = 0; i < oracle.size(); ++i) {
      double v = oracle[i] + eps;
      v = std::min(std::max(v, x.data()[i] - eps), x.data()[i] + eps);
      oracle[i] = std::min(std::max(v, 0.0), 1.0);
    }
  }
  CHECK(st.iteration == 20);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(st.x_adv.data()[i] == oracle[static_cast<size_t>(i)]);
  }
  CHECK(linf_distance(st.x_adv, st.x_clean) == doctest::Approx(eps).epsilon(1e-12));
}

TEST_CASE("momentum_update normalization and zero-gradient guard") {
  Tensor zero = Tensor::zeros({4});
  Tensor g = Tensor::from_vector({4}, {1, -2, 3, -4});
  Tensor m0 = momentum_update(zero, g, 0.0);
  double l1 = 0.0;
  for (int64_t i = 0; i < 4; ++i) l1 += std::fabs(m0.data()[i]);
  CHECK(l1 == doctest::Approx(1.0).epsilon(1e-12));

  // mu = 1 with a constant normalized gradient accumulates ||g_t||_1 = t.
  Tensor acc = Tensor::zeros({4});
  for (int t = 1; t <= 7; ++t) {
    acc = momentum_update(acc, g, 1.0);
    double norm = 0.0;
    for (int64_t i = 0; i < 4; ++i) norm += std::fabs(acc.data()[i]);
    CHECK(norm == doctest::Approx(static_cast<double>(t)).epsilon(1e-12));
  }

  // Zero gradient: mu * g_prev, no division.
  Tensor kept = momentum_update(g, Tensor::zeros({4}), 0.5);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(kept.data()[i] == doctest::Approx(0.5 * g.data()[i]).epsilon(1e-15));
  }
}

TEST_CASE("momentum_update is per-image for batched tensors") {
  Rng rng(7);
  Tensor g = random_tensor({3, 2, 2, 2}, rng, -2, 2);
  Tensor out = momentum_update(Tensor::zeros(g.shape()), g, 0.0);
  for (int64_t b = 0; b < 3; ++b) {
    double l1 = 0.0;
    for (int64_t i = 0; i < 8; ++i) l1 += std::fabs(out.data()[b * 8 + i]);
    CHECK(l1 == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("momentum l1 growth bound") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor gp = random_tensor({6}, rng, -1, 1);
    Tensor g = random_tensor({6}, rng, -1, 1);
    double mu = rng.uniform(0.0, 1.5);
    Tensor out = momentum_update(gp, g, mu);
    double before = 0.0, after = 0.0;
    for (int64_t i = 0; i < 6; ++i) {
      before += std::fabs(gp.data()[i]);
      after += std::fabs(out.data()[i]);
    }
    CHECK(after <= mu * before + 1.0 + 1e-12);
  }
}

TEST_CASE("di_transform identity, degenerate geometry and shape contract") {
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);

  Rng r0(1);
  Tensor same = di_transform(x, 0.0, 248.0 / 224.0, r0);
  CHECK(bitwise_equal(same, x));

  // di_scale_max = 1 forces rnd = H and no padding: identity up to the
  // resize round-trip.
  Rng r1(2);
  Tensor round = di_transform(x, 1.0, 1.0, r1);
  CHECK(linf_distance(round, x) < 1e-9);

  for (int pass = 0; pass < 10; ++pass) {
    Rng rp(100 + pass);
    Tensor out = di_transform(x, 1.0, 248.0 / 224.0, rp);
    CHECK(out.shape() == x.shape());
  }
}

TEST_CASE("di_transform is differentiable and deterministic under a pinned stream") {
  Rng rng(13);
  Tensor x = random_tensor({1, 2, 8, 8}, rng, 0.2, 0.8, true);
  Tensor w = random_tensor({1, 2, 8, 8}, rng);
  auto apply = [&](const Tensor& t) {
    Rng pinned(55);
    return sum(mul(di_transform(t, 1.0, 1.25, pinned), w));
  };
  backward(apply(x));
  std::vector<double> an = to_vector(x.grad());
  auto fd = finite_difference_gradient(
      [&](const Tensor& t) { return apply(t).item(); }, x.detach());
  CHECK(max_rel_error(an, fd) < 1e-6);

  Rng a(55), b(55);
  Tensor o1 = di_transform(x.detach(), 1.0, 1.25, a);
  Tensor o2 = di_transform(x.detach(), 1.0, 1.25, b);
  CHECK(bitwise_equal(o1, o2));
}

TEST_CASE("gaussian kernel normalization for many shapes") {
  for (int64_t size : {1, 3, 5, 7, 11}) {
    for (double sigma : {0.5, 1.0, 1.5, 3.0}) {
      Tensor k = gaussian_kernel2d(size, sigma);
      double total = 0.0;
      for (int64_t i = 0; i < k.numel(); ++i) total += k.data()[i];
      CHECK(std::fabs(total - 1.0) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(gaussian_kernel2d(4, 1.0), ConfigError);
}

TEST_CASE("ti_smooth: constant field interior, impulse response, shape") {
  // Constant gradient: interior pixels are unchanged by a unit-sum kernel.
  Tensor flat = Tensor::full({1, 1, 9, 9}, 0.73);
  Tensor smoothed = ti_smooth(flat, 5, 1.5);
  REQUIRE(smoothed.shape() == flat.shape());
  for (int64_t i = 2; i < 7; ++i) {
    for (int64_t j = 2; j < 7; ++j) {
      CHECK(smoothed.at({0, 0, i, j}) == doctest::Approx(0.73).epsilon(1e-12));
    }
  }

  // Single impulse: the distribution equals the kernel centered on it.
  std::vector<double> data(81, 0.0);
  data[4 * 9 + 4] = 1.0;
  Tensor impulse = Tensor::from_vector({1, 1, 9, 9}, std::move(data));
  Tensor k = gaussian_kernel2d(5, 1.5);
  Tensor out = ti_smooth(impulse, 5, 1.5);
  // Brute-force oracle: zero-padded convolution by explicit loops.
  for (int64_t i = 0; i < 9; ++i) {
    for (int64_t j = 0; j < 9; ++j) {
      double expected = 0.0;
      for (int64_t u = 0; u < 5; ++u) {
        for (int64_t v = 0; v < 5; ++v) {
          int64_t si = i + u - 2, sj = j + v - 2;
          if (si == 4 && sj == 4) expected += k.at({u, v});
        }
      }
      CHECK(out.at({0, 0, i, j}) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}
