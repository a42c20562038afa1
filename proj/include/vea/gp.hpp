#pragma once

#include <vector>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"

namespace vea {

/// Gaussian-process surrogate with a Matern-5/2 kernel and per-dimension
/// length-scales. Observations live in the unit-scaled search box.
struct GpState {
  std::vector<std::vector<double>> points;
  std::vector<double> values;

  std::vector<double> length_scales;  // one per dimension
  double signal_var = 1.0;
  double noise_var = 1e-6;

  bool fitted = false;

  // Factorization cache (filled by gp_factorize).
  std::vector<double> chol;   // lower-triangular L of K + noise*I, row-major n*n
  std::vector<double> alpha;  // (K + noise*I)^{-1} (y - y_mean)
  double y_mean = 0.0;

  size_t size() const { return points.size(); }
  void add_observation(std::vector<double> x, double y);
};

double matern52(const std::vector<double>& a, const std::vector<double>& b,
                const std::vector<double>& length_scales, double signal_var);

/// Recomputes the Cholesky factorization for the current hyperparameters,
/// escalating jitter on failure and throwing once jitter exceeds 1e-2.
void gp_factorize(GpState& state);

/// Sets kernel hyperparameters by maximizing the log marginal likelihood
/// (random multi-start plus coordinate refinement) and factorizes.
void gp_fit(GpState& state);

double gp_log_marginal_likelihood(const GpState& state);

struct GpPosterior {
  double mean = 0.0;
  double var = 0.0;
};

/// Posterior at x. With no conditioning data this is the prior (0, signal_var).
GpPosterior gp_posterior(const GpState& state, const std::vector<double>& x);

/// Expected improvement below `best` for a minimization problem.
double expected_improvement(double mean, double var, double best);

}  // namespace vea
