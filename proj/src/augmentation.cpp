#include "vea/augmentation.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "vea/ops.hpp"

namespace vea {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::MHD: return "MHD";
    case Strategy::ASS: return "ASS";
    case Strategy::MFM: return "MFM";
  }
  throw ConfigError("unknown strategy");
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "MHD") return Strategy::MHD;
  if (name == "ASS") return Strategy::ASS;
  if (name == "MFM") return Strategy::MFM;
  throw ConfigError("unknown strategy name '" + name + "'");
}

AugmentationSpec AugmentationSpec::mhd(double tau) {
  AugmentationSpec spec;
  spec.strategy = Strategy::MHD;
  spec.tau = tau;
  spec.validate();
  return spec;
}

AugmentationSpec AugmentationSpec::ass(double s, double xi) {
  AugmentationSpec spec;
  spec.strategy = Strategy::ASS;
  spec.s = s;
  spec.xi = xi;
  spec.validate();
  return spec;
}

AugmentationSpec AugmentationSpec::mfm(double rho) {
  AugmentationSpec spec;
  spec.strategy = Strategy::MFM;
  spec.rho = rho;
  spec.validate();
  return spec;
}

void AugmentationSpec::validate() const {
  switch (strategy) {
    case Strategy::MHD:
      if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("MHD: tau must be in [0,1]");
      return;
    case Strategy::ASS:
      // s = 1, xi = 0 is the identity boundary, allowed for testing.
      if (!(s > 0.0 && s <= 1.0)) throw ConfigError("ASS: s must be in (0,1]");
      if (!(xi >= 0.0 && xi < 1.0)) throw ConfigError("ASS: xi must be in [0,1)");
      return;
    case Strategy::MFM:
      if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("MFM: rho must be in [0,1]");
      return;
  }
  throw ConfigError("malformed AugmentationSpec");
}

bool AugmentationSpec::is_identity() const {
  switch (strategy) {
    case Strategy::MHD: return tau == 0.0;
    case Strategy::ASS: return s == 1.0 && xi == 0.0;
    case Strategy::MFM: return rho == 0.0;
  }
  return false;
}

std::string AugmentationSpec::to_string() const {
  std::ostringstream os;
  switch (strategy) {
    case Strategy::MHD: os << "MHD(tau=" << tau << ")"; break;
    case Strategy::ASS: os << "ASS(s=" << s << ",xi=" << xi << ")"; break;
    case Strategy::MFM: os << "MFM(rho=" << rho << ")"; break;
  }
  return os.str();
}

AttentionHook mhd_hook(double tau, Rng rng) {
  if (tau < 0.0 || tau > 1.0) throw ConfigError("mhd_hook: tau must be in [0,1]");
  return [tau, rng](const Tensor& attn, int64_t block) -> Tensor {
    int64_t heads = attn.dim(1);
    Rng stream = rng.derive(static_cast<uint64_t>(block));
    std::vector<double> mask(static_cast<size_t>(heads), 1.0);
    bool any_dropped = false;
    for (int64_t h = 0; h < heads; ++h) {
      if (stream.next_double() < tau) {
        mask[static_cast<size_t>(h)] = 0.0;
        any_dropped = true;
      }
    }
    if (!any_dropped) return attn;
    return mul(attn, Tensor::from_vector({heads, 1, 1}, std::move(mask)));
  };
}

AttentionHook ass_hook(double s, double xi, Rng rng) {
  if (!(s > 0.0 && s <= 1.0) || !(xi >= 0.0 && xi < 1.0)) {
    throw ConfigError("ass_hook: require s in (0,1], xi in [0,1)");
  }
  return [s, xi, rng](const Tensor& attn, int64_t block) -> Tensor {
    if (s == 1.0 && xi == 0.0) return attn;
    int64_t heads = attn.dim(1), t1 = attn.dim(2), t2 = attn.dim(3);
    Rng stream = rng.derive(static_cast<uint64_t>(block));
    double lo = std::max(0.0, s - xi);
    double hi = s + xi;
    int64_t n = heads * t1 * t2;
    std::vector<double> factors(static_cast<size_t>(n));
    for (auto& f : factors) f = stream.uniform(lo, hi);
    return mul(attn, Tensor::from_vector({heads, t1, t2}, std::move(factors)));
  };
}

MlpHook mfm_hook(double rho, Rng rng, bool channel_axis) {
  if (rho < 0.0 || rho > 1.0) throw ConfigError("mfm_hook: rho must be in [0,1]");
  return [rho, rng, channel_axis](const Tensor& m, int64_t block) -> Tensor {
    if (rho == 0.0) return m;
    int axis = channel_axis ? 2 : 1;
    int64_t len = m.dim(axis);
    Rng stream = rng.derive(static_cast<uint64_t>(block));
    std::vector<int64_t> perm(static_cast<size_t>(len));
    std::iota(perm.begin(), perm.end(), 0);
    stream.shuffle(perm);
    Tensor mixed = permute_rows(m, perm, axis);
    return add(scale(m, 1.0 - rho), scale(mixed, rho));
  };
}

InterceptorSet AugmentedModel::interceptors(const Rng& pass_rng) const {
  InterceptorSet hooks;
  switch (spec.strategy) {
    case Strategy::MHD:
      hooks.attention_hook = mhd_hook(spec.tau, pass_rng);
      break;
    case Strategy::ASS:
      hooks.attention_hook = ass_hook(spec.s, spec.xi, pass_rng);
      break;
    case Strategy::MFM:
      hooks.mlp_hook = mfm_hook(spec.rho, pass_rng, mfm_channel_axis);
      break;
  }
  return hooks;
}

Tensor AugmentedModel::forward(const Tensor& images, const Rng& pass_rng) const {
  return vea::forward(*base, images, interceptors(pass_rng));
}

AugmentedModel build(const ViTModel& base, const AugmentationSpec& spec,
                     bool mfm_channel_axis) {
  spec.validate();
  AugmentedModel model;
  model.base = &base;
  model.spec = spec;
  model.mfm_channel_axis = mfm_channel_axis;
  return model;
}

}  // namespace vea
