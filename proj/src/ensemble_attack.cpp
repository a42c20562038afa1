#include "vea/ensemble_attack.hpp"

#include <algorithm>
#include <cmath>

#include "vea/ops.hpp"

namespace vea {

namespace {

// Child-stream tags inside one attack iteration.
constexpr uint64_t kDiStream = 0;
constexpr uint64_t kMemberStreamBase = 1;

}  // namespace

std::string variant_name(AttackVariant v) {
  switch (v) {
    case AttackVariant::I: return "I-FGSM";
    case AttackVariant::MI: return "MI-FGSM";
    case AttackVariant::DI: return "DI-FGSM";
    case AttackVariant::TI: return "TI-FGSM";
  }
  throw ConfigError("unknown attack variant");
}

AttackVariant variant_from_name(const std::string& name) {
  if (name == "I-FGSM" || name == "I") return AttackVariant::I;
  if (name == "MI-FGSM" || name == "MI") return AttackVariant::MI;
  if (name == "DI-FGSM" || name == "DI") return AttackVariant::DI;
  if (name == "TI-FGSM" || name == "TI") return AttackVariant::TI;
  throw ConfigError("unknown attack variant '" + name + "'");
}

std::string mode_name(EnsembleMode m) {
  return m == EnsembleMode::viteattack ? "viteattack" : "ens_baseline";
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw ConfigError("EnsembleSpec: at least one member required");
  for (const auto& m : members) {
    if (m.model == nullptr) throw ConfigError("EnsembleSpec: null member model");
  }
  if (mode == EnsembleMode::viteattack) {
    for (const auto& m : members) {
      if (m.specs.size() != 3) {
        throw ConfigError("EnsembleSpec: viteattack members carry exactly 3 specs");
      }
      bool seen[3] = {false, false, false};
      for (const auto& s : m.specs) {
        s.validate();
        seen[static_cast<int>(s.strategy)] = true;
      }
      if (!(seen[0] && seen[1] && seen[2])) {
        throw ConfigError("EnsembleSpec: viteattack members need one spec per strategy");
      }
    }
  }
}

WeightVector reweight(std::span<const double> losses, double b) {
  if (losses.empty()) throw ConfigError("reweight: empty loss vector");
  if (b < 0.0) throw ConfigError("reweight: b must be >= 0");
  for (double l : losses) {
    if (l < 0.0) throw ConfigError("reweight: losses must be nonnegative");
  }
  double l_max = *std::max_element(losses.begin(), losses.end());
  l_max = std::max(l_max, 1e-12);
  WeightVector out;
  out.w.resize(losses.size());
  double total = 0.0;
  for (size_t i = 0; i < losses.size(); ++i) {
    double ratio = l_max / std::max(losses[i], 1e-12);
    out.w[i] = std::pow(ratio, b);
    total += out.w[i];
  }
  for (double& w : out.w) w /= total;
  return out;
}

AttackModules AttackModules::for_mode(EnsembleMode mode) {
  AttackModules m;
  if (mode == EnsembleMode::ens_baseline) {
    m.augmentation = false;
    m.reweighting = false;
    m.enlargement = false;
  }
  return m;
}

Tensor member_loss(const EnsembleMember& member, const Tensor& x,
                   std::span<const int64_t> y, int64_t loop, Rng rng,
                   bool mfm_channel_axis) {
  if (loop < 1) throw ConfigError("member_loss: loop must be >= 1");
  if (member.specs.empty()) {
    throw ConfigError("member_loss: member has no augmentation specs");
  }
  Tensor total;
  for (int64_t pass = 0; pass < loop; ++pass) {
    Rng pass_rng = rng.derive(static_cast<uint64_t>(pass));
    for (size_t vi = 0; vi < member.specs.size(); ++vi) {
      AugmentedModel variant = build(*member.model, member.specs[vi], mfm_channel_axis);
      Tensor logits = variant.forward(x, pass_rng.derive(vi));
      Tensor j = cross_entropy(logits, y);
      total = total.defined() ? add(total, j) : j;
    }
  }
  return total;
}

Tensor attack_batch_with_modules(const std::vector<EnsembleMember>& members,
                                 const Tensor& x, std::span<const int64_t> y,
                                 const AttackConfig& cfg, AttackVariant variant,
                                 const AttackModules& modules, Rng rng,
                                 bool mfm_channel_axis) {
  cfg.validate();
  if (members.empty()) throw ConfigError("attack_batch: no ensemble members");
  if (modules.augmentation) {
    for (const auto& m : members) {
      if (m.specs.empty()) {
        throw ConfigError("attack_batch: augmentation enabled but a member has no specs");
      }
    }
  }
  if (modules.loss_scale <= 0.0) {
    throw ConfigError("attack_batch: loss_scale must be positive");
  }
  if (x.ndim() != 4) throw ShapeError("attack_batch: images must be [B,C,H,W]");
  if (static_cast<int64_t>(y.size()) != x.dim(0)) {
    throw ShapeError("attack_batch: label count mismatch");
  }
  {
    const double* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (p[i] < 0.0 || p[i] > 1.0) {
        throw InvariantError("attack_batch: clean images must lie in [0,1]");
      }
    }
  }

  const int64_t n_members = static_cast<int64_t>(members.size());
  const double alpha = modules.enlargement
                           ? cfg.alpha()
                           : cfg.epsilon / static_cast<double>(cfg.iterations);
  const double mu = (variant == AttackVariant::I) ? 0.0 : cfg.mu;
  const double b = modules.reweighting ? cfg.b : 0.0;
  const int64_t loop = modules.augmentation ? cfg.loop : 1;

  PerturbationState state = PerturbationState::init(x, cfg.epsilon);
  for (int64_t t = 0; t < cfg.iterations; ++t) {
    Rng iter_rng = rng.derive(static_cast<uint64_t>(t));
    Tensor x_leaf = state.x_adv.clone();
    x_leaf.set_requires_grad(true);

    std::vector<double> losses(static_cast<size_t>(n_members));
    std::vector<Tensor> member_grads(static_cast<size_t>(n_members));
    for (int64_t i = 0; i < n_members; ++i) {
      // DI is one transform per iteration: every member re-derives the same
      // stream, so all members see bitwise-identical transformed inputs.
      Tensor x_in = x_leaf;
      if (variant == AttackVariant::DI) {
        Rng di_rng = iter_rng.derive(kDiStream);
        x_in = di_transform(x_leaf, cfg.di_prob, cfg.di_scale_max, di_rng);
      }
      Tensor loss;
      Rng member_rng = iter_rng.derive(kMemberStreamBase + static_cast<uint64_t>(i));
      if (modules.augmentation) {
        loss = member_loss(members[static_cast<size_t>(i)], x_in, y, loop, member_rng,
                           mfm_channel_axis);
      } else {
        loss = cross_entropy(forward(*members[static_cast<size_t>(i)].model, x_in), y);
      }
      if (modules.loss_scale != 1.0) loss = scale(loss, modules.loss_scale);
      losses[static_cast<size_t>(i)] = loss.item();
      backward(loss);
      member_grads[static_cast<size_t>(i)] = x_leaf.grad();
      x_leaf.clear_grad();
    }

    WeightVector weights = reweight(losses, b);
    std::vector<double> combined(static_cast<size_t>(x.numel()), 0.0);
    for (int64_t i = 0; i < n_members; ++i) {
      const double w = weights.w[static_cast<size_t>(i)];
      const double* g = member_grads[static_cast<size_t>(i)].data();
      for (int64_t j = 0; j < x.numel(); ++j) combined[static_cast<size_t>(j)] += w * g[j];
    }
    Tensor g = Tensor::from_vector(x.shape(), std::move(combined));
    if (variant == AttackVariant::TI) {
      g = ti_smooth(g, cfg.ti_kernel_size, cfg.ti_sigma);
    }
    state.g_momentum = momentum_update(state.g_momentum, g, mu);
    state = fgsm_step(state, state.g_momentum, alpha);
  }
  return state.x_adv;
}

Tensor attack_batch(const EnsembleSpec& spec, const Tensor& x,
                    std::span<const int64_t> y, const AttackConfig& cfg,
                    AttackVariant variant, Rng rng, bool mfm_channel_axis) {
  spec.validate();
  AttackModules modules = AttackModules::for_mode(spec.mode);
  return attack_batch_with_modules(spec.members, x, y, cfg, variant, modules,
                                   rng, mfm_channel_axis);
}

std::vector<double> white_box_asr(const std::vector<EnsembleMember>& members,
                                  const Tensor& x_adv, std::span<const int64_t> y) {
  if (static_cast<int64_t>(y.size()) != x_adv.dim(0)) {
    throw ShapeError("white_box_asr: label count mismatch");
  }
  std::vector<double> out;
  out.reserve(members.size());
  for (const auto& m : members) {
    Tensor logits = forward(*m.model, x_adv.detach());
    auto pred = argmax_rows(logits);
    int64_t wrong = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] != y[i]) ++wrong;
    }
    out.push_back(static_cast<double>(wrong) / static_cast<double>(pred.size()));
  }
  return out;
}

}  // namespace vea
