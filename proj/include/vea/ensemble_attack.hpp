#pragma once

#include <span>
#include <string>
#include <vector>

#include "vea/attacks.hpp"
#include "vea/augmentation.hpp"
#include "vea/rng.hpp"
#include "vea/vit.hpp"

namespace vea {

enum class AttackVariant { I, MI, DI, TI };
enum class EnsembleMode { viteattack, ens_baseline };

std::string variant_name(AttackVariant v);
AttackVariant variant_from_name(const std::string& name);
std::string mode_name(EnsembleMode m);

struct EnsembleMember {
  const ViTModel* model = nullptr;
  std::vector<AugmentationSpec> specs;  // one per strategy in use
};

struct EnsembleSpec {
  std::vector<EnsembleMember> members;
  EnsembleMode mode = EnsembleMode::viteattack;

  void validate() const;
};

struct WeightVector {
  std::vector<double> w;  // nonnegative, sums to 1
};

/// Eq.-style automatic reweighting: w_i = (L_max/L_i)^b / sum_j (L_max/L_j)^b
/// with L_i guarded by max(L_i, 1e-12). b = 0 gives uniform weights.
WeightVector reweight(std::span<const double> losses, double b);

/// Module switches for ablations. The full method has all three on; the Ens
/// baseline has all three off.
struct AttackModules {
  bool augmentation = true;  // augmented variants + loop-repeated inference
  bool reweighting = true;   // Eq. weights instead of uniform
  bool enlargement = true;   // alpha = q*eps/T instead of eps/T
  // Uniform positive rescale applied to every member loss; the attack
  // trajectory must be invariant to it (exercised by the equivalence tests).
  double loss_scale = 1.0;

  static AttackModules for_mode(EnsembleMode mode);
};

/// Loop-accumulated member loss: sum over `loop` passes of the sum of
/// J(variant(x)) over the member's augmentation specs, each pass with fresh
/// draws. The result stays on the tape.
Tensor member_loss(const EnsembleMember& member, const Tensor& x,
                   std::span<const int64_t> y, int64_t loop, Rng rng,
                   bool mfm_channel_axis = false);

/// The phase-2 attack driver over a batch of images in [0,1].
Tensor attack_batch(const EnsembleSpec& spec, const Tensor& x,
                    std::span<const int64_t> y, const AttackConfig& cfg,
                    AttackVariant variant, Rng rng, bool mfm_channel_axis = false);

/// Same driver with explicit module switches (used by the ablation grid; the
/// member spec-count check is relaxed so strategy subsets can run).
Tensor attack_batch_with_modules(const std::vector<EnsembleMember>& members,
                                 const Tensor& x, std::span<const int64_t> y,
                                 const AttackConfig& cfg, AttackVariant variant,
                                 const AttackModules& modules, Rng rng,
                                 bool mfm_channel_axis = false);

/// Fraction of x_adv misclassified by each original (un-augmented) member.
std::vector<double> white_box_asr(const std::vector<EnsembleMember>& members,
                                  const Tensor& x_adv, std::span<const int64_t> y);

}  // namespace vea
