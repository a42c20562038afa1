#pragma once

#include "vea/rng.hpp"
#include "vea/tensor.hpp"

namespace vea {

/// All attack hyper-parameters. The step size alpha = q * epsilon / T is
/// derived, never stored.
struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  int64_t iterations = 10;  // T
  double q = 3.0;           // step size enlargement
  double mu = 1.0;          // momentum decay
  int64_t loop = 2;         // stochastic inference repetitions
  double b = 2.0;           // reweighting exponent
  double di_prob = 0.5;
  double di_scale_max = 248.0 / 224.0;
  int64_t ti_kernel_size = 5;
  double ti_sigma = 1.5;

  void validate() const;
  double alpha() const { return q * epsilon / static_cast<double>(iterations); }
};

/// Per-batch attack state. x_adv always stays inside the eps-ball around
/// x_clean intersected with [0,1]; check_invariants() enforces it.
struct PerturbationState {
  Tensor x_clean;
  Tensor x_adv;
  Tensor g_momentum;
  double epsilon = 0.0;
  int64_t iteration = 0;

  static PerturbationState init(const Tensor& x_clean, double epsilon);
  void check_invariants() const;
};

/// One projected sign step: x_adv <- clip_{eps,[0,1]}(x_adv + alpha*sign(grad)).
PerturbationState fgsm_step(const PerturbationState& state, const Tensor& grad,
                            double alpha);

/// mu * g_prev + grad / ||grad||_1. For 4-D [B,C,H,W] tensors the L1 norm is
/// taken per image so batched attacks stay independent across images; zero
/// gradients skip the normalization and return mu * g_prev.
Tensor momentum_update(const Tensor& g_prev, const Tensor& grad, double mu);

/// DI input transformation: with probability di_prob, resize to a random
/// rnd in [H, floor(di_scale_max*H)), zero-pad at a random offset to the
/// enlarged square, and bilinear-resize back to HxW (differentiable).
Tensor di_transform(const Tensor& images, double di_prob, double di_scale_max,
                    Rng& rng);

/// Normalized Gaussian kernel (entries sum to 1).
Tensor gaussian_kernel2d(int64_t size, double sigma);

/// TI gradient smoothing: depthwise convolution with the Gaussian kernel.
Tensor ti_smooth(const Tensor& grad, int64_t kernel_size, double sigma);

}  // namespace vea
