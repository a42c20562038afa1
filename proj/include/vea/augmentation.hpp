#pragma once

#include <functional>
#include <string>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"
#include "vea/vit.hpp"

namespace vea {

enum class Strategy { MHD, ASS, MFM };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

/// One augmentation strategy plus its parameter(s): tau for MHD, (s, xi) for
/// ASS, rho for MFM.
struct AugmentationSpec {
  Strategy strategy = Strategy::MHD;
  double tau = 0.0;
  double s = 1.0;
  double xi = 0.0;
  double rho = 0.0;

  static AugmentationSpec mhd(double tau);
  static AugmentationSpec ass(double s, double xi);
  static AugmentationSpec mfm(double rho);

  void validate() const;
  /// True when the spec is at its identity limit (hook is a no-op).
  bool is_identity() const;
  std::string to_string() const;
};

using AttentionHook = std::function<Tensor(const Tensor&, int64_t)>;
using MlpHook = std::function<Tensor(const Tensor&, int64_t)>;

/// Multi-head dropping: per forward pass each (block, head) independently
/// draws u ~ U[0,1); heads with u < tau get an all-zero post-softmax score
/// matrix. Draws are keyed by (rng, block) so the same stream replays.
AttentionHook mhd_hook(double tau, Rng rng);

/// Attention score scaling: per pass and block an [H, T, T] matrix of
/// i.i.d. U[max(0, s-xi), s+xi] factors multiplies the scores elementwise
/// (broadcast over the batch). No renormalization afterwards.
AttentionHook ass_hook(double s, double xi, Rng rng);

/// MLP feature mixing: per pass and block a uniform random permutation pi of
/// the token axis mixes the MLP output M as (1-rho)*M + rho*M[pi].
/// With channel_axis the permutation acts on the channel axis instead.
MlpHook mfm_hook(double rho, Rng rng, bool channel_axis = false);

/// A surrogate with one strategy installed at forward time. Base parameters
/// are never touched; every forward resamples its draws from `pass_rng`.
struct AugmentedModel {
  const ViTModel* base = nullptr;
  AugmentationSpec spec;
  bool mfm_channel_axis = false;

  InterceptorSet interceptors(const Rng& pass_rng) const;
  Tensor forward(const Tensor& images, const Rng& pass_rng) const;
};

AugmentedModel build(const ViTModel& base, const AugmentationSpec& spec,
                     bool mfm_channel_axis = false);

}  // namespace vea
