#include "vea/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vea {

namespace {

constexpr double kSqrt5 = 2.2360679774997896964;
constexpr double kHalfLog2Pi = 0.9189385332046727418;

// Plain lower-triangular Cholesky; returns false if a pivot is not positive.
bool cholesky(std::vector<double>& a, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double sum = a[i * n + j];
      for (size_t k = 0; k < j; ++k) sum -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (sum <= 0.0 || !std::isfinite(sum)) return false;
        a[i * n + i] = std::sqrt(sum);
      } else {
        a[i * n + j] = sum / a[j * n + j];
      }
    }
    for (size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  }
  return true;
}

void solve_lower(const std::vector<double>& l, size_t n, std::vector<double>& b) {
  for (size_t i = 0; i < n; ++i) {
    double sum = b[i];
    for (size_t k = 0; k < i; ++k) sum -= l[i * n + k] * b[k];
    b[i] = sum / l[i * n + i];
  }
}

void solve_upper_from_lower(const std::vector<double>& l, size_t n, std::vector<double>& b) {
  for (size_t ii = n; ii-- > 0;) {
    double sum = b[ii];
    for (size_t k = ii + 1; k < n; ++k) sum -= l[k * n + ii] * b[k];
    b[ii] = sum / l[ii * n + ii];
  }
}

std::vector<double> kernel_matrix(const GpState& s, double jitter) {
  size_t n = s.size();
  std::vector<double> k(n * n);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double v = matern52(s.points[i], s.points[j], s.length_scales, s.signal_var);
      k[i * n + j] = v;
      k[j * n + i] = v;
    }
    k[i * n + i] += s.noise_var + jitter;
  }
  return k;
}

}  // namespace

void GpState::add_observation(std::vector<double> x, double y) {
  if (!points.empty() && x.size() != points.front().size()) {
    throw ShapeError("GpState: inconsistent point dimensionality");
  }
  points.push_back(std::move(x));
  values.push_back(y);
  fitted = false;
}

double matern52(const std::vector<double>& a, const std::vector<double>& b,
                const std::vector<double>& length_scales, double signal_var) {
  double d2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double r = (a[i] - b[i]) / length_scales[i];
    d2 += r * r;
  }
  double d = std::sqrt(d2);
  double t = kSqrt5 * d;
  return signal_var * (1.0 + t + t * t / 3.0) * std::exp(-t);
}

void gp_factorize(GpState& state) {
  size_t n = state.size();
  if (n == 0) {
    state.fitted = true;
    return;
  }
  size_t dim = state.points.front().size();
  if (state.length_scales.size() != dim) {
    throw ConfigError("gp_factorize: length_scales dimensionality mismatch");
  }
  state.y_mean = 0.0;
  for (double v : state.values) state.y_mean += v;
  state.y_mean /= static_cast<double>(n);

  double jitter = 0.0;
  for (;;) {
    std::vector<double> k = kernel_matrix(state, jitter);
    if (cholesky(k, n)) {
      state.chol = std::move(k);
      break;
    }
    jitter = (jitter == 0.0) ? 1e-10 : jitter * 10.0;
    if (jitter > 1e-2) {
      throw InvariantError("gp_factorize: kernel matrix stayed singular at max jitter");
    }
  }
  state.alpha.resize(n);
  for (size_t i = 0; i < n; ++i) state.alpha[i] = state.values[i] - state.y_mean;
  solve_lower(state.chol, n, state.alpha);
  solve_upper_from_lower(state.chol, n, state.alpha);
  state.fitted = true;
}

double gp_log_marginal_likelihood(const GpState& state) {
  size_t n = state.size();
  if (n == 0 || state.chol.empty()) {
    throw ContractError("gp_log_marginal_likelihood: factorize first");
  }
  double fit = 0.0;
  for (size_t i = 0; i < n; ++i) {
    fit += (state.values[i] - state.y_mean) * state.alpha[i];
  }
  double logdet = 0.0;
  for (size_t i = 0; i < n; ++i) logdet += std::log(state.chol[i * n + i]);
  return -0.5 * fit - logdet - static_cast<double>(n) * kHalfLog2Pi;
}

void gp_fit(GpState& state) {
  size_t n = state.size();
  if (n < 2) throw ContractError("gp_fit: need at least 2 observations");
  size_t dim = state.points.front().size();

  double y_var = 0.0, y_mean = 0.0;
  for (double v : state.values) y_mean += v;
  y_mean /= static_cast<double>(n);
  for (double v : state.values) y_var += (v - y_mean) * (v - y_mean);
  y_var /= static_cast<double>(n);
  y_var = std::max(y_var, 1e-12);

  // Deterministic random multi-start over log-uniform hyperparameter boxes,
  // then a few rounds of per-coordinate refinement.
  Rng rng(0x9db1a5u);
  auto sample_config = [&](GpState& cand) {
    cand.length_scales.resize(dim);
    for (size_t d = 0; d < dim; ++d) {
      cand.length_scales[d] = std::exp(rng.uniform(std::log(0.03), std::log(3.0)));
    }
    cand.signal_var = y_var * std::exp(rng.uniform(std::log(0.1), std::log(10.0)));
    cand.noise_var = y_var * std::exp(rng.uniform(std::log(1e-8), std::log(1.0)));
  };
  auto score = [&](GpState& cand) -> double {
    try {
      gp_factorize(cand);
      return gp_log_marginal_likelihood(cand);
    } catch (const InvariantError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  GpState best = state;
  best.length_scales.assign(dim, 0.5);
  best.signal_var = y_var;
  best.noise_var = y_var * 1e-2;
  double best_lml = score(best);

  const int kStarts = 160;
  for (int it = 0; it < kStarts; ++it) {
    GpState cand = state;
    sample_config(cand);
    double lml = score(cand);
    if (lml > best_lml) {
      best_lml = lml;
      best = std::move(cand);
    }
  }

  // Coordinate refinement in log space.
  const double kSteps[] = {0.5, 0.25, 0.1};
  for (double step : kSteps) {
    for (size_t d = 0; d < dim + 2; ++d) {
      for (double dir : {+1.0, -1.0}) {
        GpState cand = best;
        double* target = d < dim ? &cand.length_scales[d]
                                 : (d == dim ? &cand.signal_var : &cand.noise_var);
        *target = std::exp(std::log(*target) + dir * step);
        if (d < dim) *target = std::clamp(*target, 0.01, 10.0);
        if (d == dim) *target = std::clamp(*target, y_var * 1e-3, y_var * 1e3);
        if (d == dim + 1) *target = std::clamp(*target, y_var * 1e-9, y_var * 10.0);
        double lml = score(cand);
        if (lml > best_lml) {
          best_lml = lml;
          best = std::move(cand);
        }
      }
    }
  }

  state.length_scales = best.length_scales;
  state.signal_var = best.signal_var;
  state.noise_var = best.noise_var;
  gp_factorize(state);
}

GpPosterior gp_posterior(const GpState& state, const std::vector<double>& x) {
  GpPosterior post;
  size_t n = state.size();
  if (n == 0) {
    // No conditioning data: the prior.
    post.mean = 0.0;
    post.var = state.signal_var;
    return post;
  }
  if (!state.fitted || state.chol.empty()) {
    throw ContractError("gp_posterior: factorize first");
  }
  std::vector<double> kstar(n);
  for (size_t i = 0; i < n; ++i) {
    kstar[i] = matern52(x, state.points[i], state.length_scales, state.signal_var);
  }
  double mean = state.y_mean;
  for (size_t i = 0; i < n; ++i) mean += kstar[i] * state.alpha[i];
  std::vector<double> v = kstar;
  solve_lower(state.chol, n, v);
  double reduction = 0.0;
  for (size_t i = 0; i < n; ++i) reduction += v[i] * v[i];
  post.mean = mean;
  post.var = std::max(state.signal_var - reduction, 0.0);
  return post;
}

double expected_improvement(double mean, double var, double best) {
  if (var <= 0.0) return std::max(best - mean, 0.0);
  double sd = std::sqrt(var);
  double z = (best - mean) / sd;
  double cdf = 0.5 * std::erfc(-z * 0.70710678118654752440);
  double pdf = 0.39894228040143267794 * std::exp(-0.5 * z * z);
  return sd * (z * cdf + pdf);
}

}  // namespace vea
