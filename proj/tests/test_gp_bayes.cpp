#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vea/bayes_opt.hpp"
#include "vea/gp.hpp"

using namespace vea;

TEST_CASE("matern52 kernel basics") {
  std::vector<double> ls{0.5, 0.5};
  std::vector<double> a{0.2, 0.4}, b{0.2, 0.4}, c{0.9, 0.9};
  CHECK(matern52(a, b, ls, 2.0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(matern52(a, c, ls, 2.0) < 2.0);
  CHECK(matern52(a, c, ls, 2.0) > 0.0);
}

TEST_CASE("gp posterior reduces to the prior without observations") {
  GpState state;
  state.length_scales = {0.5};
  state.signal_var = 3.0;
  GpPosterior prior = gp_posterior(state, {0.3});
  CHECK(prior.mean == 0.0);
  CHECK(prior.var == doctest::Approx(3.0));
}

TEST_CASE("gp interpolates noiseless GP samples at the observed points") {
  // Draw y = L z from the prior at fixed hyperparameters, factorize with a
  // tiny noise floor and check the posterior mean interpolates.
  Rng rng(3);
  GpState state;
  state.length_scales = {0.4};
  state.signal_var = 1.0;
  state.noise_var = 1e-10;
  std::vector<std::vector<double>> points;
  for (int i = 0; i < 9; ++i) points.push_back({0.05 + 0.11 * i});

  // Build K and its Cholesky by hand for the sample draw.
  size_t n = points.size();
  std::vector<double> k(n * n);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      k[i * n + j] = matern52(points[i], points[j], state.length_scales, state.signal_var);
    }
    k[i * n + i] += 1e-10;
  }
  // In-test Cholesky (independent of the library path).
  std::vector<double> l(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double sum = k[i * n + j];
      for (size_t m = 0; m < j; ++m) sum -= l[i * n + m] * l[j * n + m];
      l[i * n + j] = (i == j) ? std::sqrt(sum) : sum / l[j * n + j];
    }
  }
  std::vector<double> z(n);
  for (auto& v : z) v = rng.normal();
  for (size_t i = 0; i < n; ++i) {
    double y = 0.0;
    for (size_t j = 0; j <= i; ++j) y += l[i * n + j] * z[j];
    state.add_observation(points[i], y);
  }

  gp_factorize(state);
  for (size_t i = 0; i < n; ++i) {
    GpPosterior post = gp_posterior(state, points[i]);
    CHECK(std::fabs(post.mean - state.values[i]) < 1e-6);
    CHECK(post.var <= state.noise_var + 1e-9);
  }
}

TEST_CASE("gp_fit survives duplicated points via jitter") {
  GpState state;
  state.add_observation({0.5}, 0.7);
  state.add_observation({0.5}, 0.7);
  state.add_observation({0.2}, 0.1);
  CHECK_NOTHROW(gp_fit(state));
  CHECK(state.fitted);
}

TEST_CASE("expected improvement endpoints") {
  // Zero variance at the incumbent: no expected improvement.
  CHECK(expected_improvement(1.0, 0.0, 1.0) == 0.0);
  // Certain improvement with zero variance.
  CHECK(expected_improvement(0.2, 0.0, 1.0) == doctest::Approx(0.8));
  // More variance at the same mean never hurts EI.
  double lo = expected_improvement(1.0, 0.01, 1.0);
  double hi = expected_improvement(1.0, 1.0, 1.0);
  CHECK(hi > lo);
  CHECK(lo > 0.0);
}

TEST_CASE("minimize: pure random search when n_calls == n_init") {
  SearchSpace space;
  space.dims = {{"p", 0.0, 1.0}};
  auto fn = [](std::span<const double> p, Rng) { return (p[0] - 0.3) * (p[0] - 0.3); };
  MinimizeResult res = minimize(fn, space, 12, 12, Rng(5));
  CHECK(res.trace.size() == 12);
  double best = 1e9;
  for (const auto& e : res.trace) best = std::min(best, e.value);
  CHECK(res.best_value == doctest::Approx(best));
}

TEST_CASE("minimize is deterministic for a fixed seed") {
  SearchSpace space;
  space.dims = {{"p", 0.0, 1.0}};
  auto fn = [](std::span<const double> p, Rng) {
    return std::sin(5.0 * p[0]) + 0.5 * p[0];
  };
  MinimizeResult a = minimize(fn, space, 18, 6, Rng(9));
  MinimizeResult b = minimize(fn, space, 18, 6, Rng(9));
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].value == b.trace[i].value);
    CHECK(a.trace[i].point == b.trace[i].point);
  }
}

TEST_CASE("minimize finds the 1-D quadratic minimum on most seeds") {
  SearchSpace space;
  space.dims = {{"p", 0.0, 1.0}};
  auto fn = [](std::span<const double> p, Rng) { return (p[0] - 0.3) * (p[0] - 0.3); };
  int hits = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    MinimizeResult res = minimize(fn, space, 30, 10, Rng(seed));
    if (std::fabs(res.best_point[0] - 0.3) < 0.05) ++hits;
  }
  CHECK(hits >= 18);
}

TEST_CASE("minimize handles the 2-D quadratic") {
  SearchSpace space;
  space.dims = {{"s", 0.0, 1.0}, {"xi", 0.0, 1.0}};
  auto fn = [](std::span<const double> p, Rng) {
    return (p[0] - 0.6) * (p[0] - 0.6) + (p[1] - 0.2) * (p[1] - 0.2);
  };
  int hits = 0;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    MinimizeResult res = minimize(fn, space, 50, 10, Rng(100 + seed));
    double err = std::max(std::fabs(res.best_point[0] - 0.6),
                          std::fabs(res.best_point[1] - 0.2));
    if (err < 0.08) ++hits;
  }
  CHECK(hits >= 4);
}

TEST_CASE("best observed point is always one of the evaluations") {
  SearchSpace space;
  space.dims = {{"p", 0.0, 1.0}};
  auto fn = [](std::span<const double> p, Rng) { return p[0]; };
  MinimizeResult res = minimize(fn, space, 15, 5, Rng(3));
  bool found = false;
  for (const auto& e : res.trace) {
    if (e.point == res.best_point && e.value == res.best_value) found = true;
  }
  CHECK(found);
}

TEST_CASE("search space and schedule validation") {
  SearchSpace bad;
  bad.dims = {{"p", 0.7, 0.2}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  SearchSpace out_of_unit;
  out_of_unit.dims = {{"p", -0.5, 0.5}};
  CHECK_THROWS_AS(out_of_unit.validate(), ConfigError);

  SearchSpace ok;
  ok.dims = {{"p", 0.0, 1.0}};
  auto fn = [](std::span<const double>, Rng) { return 0.0; };
  CHECK_THROWS_AS(minimize(fn, ok, 5, 9, Rng(1)), ConfigError);
  CHECK_THROWS_AS(minimize(fn, ok, 5, 1, Rng(1)), ConfigError);
}

TEST_CASE("phase-1 record JSON round trip") {
  std::vector<Phase1Record> records(2);
  records[0].surrogate_id = "s0";
  records[0].strategy = Strategy::ASS;
  records[0].spec = AugmentationSpec::ass(0.61, 0.22);
  records[0].best_asr = 0.43;
  records[0].trace = {{{0.5, 0.5}, 0.2}, {{0.61, 0.22}, 0.43}};
  records[1].surrogate_id = "s1";
  records[1].strategy = Strategy::MFM;
  records[1].spec = AugmentationSpec::mfm(0.37);
  records[1].best_asr = 0.5;
  records[1].trace = {{{0.37}, 0.5}};
  auto back = phase1_from_json(phase1_to_json(records));
  REQUIRE(back.size() == 2);
  CHECK(back[0].spec.s == doctest::Approx(0.61));
  CHECK(back[0].spec.xi == doctest::Approx(0.22));
  CHECK(back[1].spec.rho == doctest::Approx(0.37));
  CHECK(back[0].trace.size() == 2);
  CHECK(back[1].best_asr == doctest::Approx(0.5));

  CHECK_THROWS_AS(phase1_from_json("not json"), IoError);
}
