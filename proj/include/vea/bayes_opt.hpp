#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vea/attacks.hpp"
#include "vea/augmentation.hpp"
#include "vea/gp.hpp"
#include "vea/rng.hpp"
#include "vea/vit.hpp"

namespace vea {

struct SearchSpace {
  struct Dim {
    std::string name;
    double lower = 0.0;
    double upper = 1.0;
  };
  std::vector<Dim> dims;

  void validate() const;
  size_t rank() const { return dims.size(); }
};

/// Everything one objective evaluation needs: the surrogate being augmented,
/// the held-out test surrogates, and the BO image pool.
struct ObjectiveContext {
  Strategy strategy = Strategy::MHD;
  const ViTModel* surrogate = nullptr;
  std::vector<const ViTModel*> test_models;
  const Tensor* pool_images = nullptr;            // [P, C, H, W]
  const std::vector<int64_t>* pool_labels = nullptr;
  int64_t m_samples = 64;
  AttackConfig inner_attack;  // plain MI-FGSM: loop/enlargement/reweighting unused
  bool mfm_channel_axis = false;
};

AugmentationSpec spec_from_params(Strategy strategy, std::span<const double> p);
SearchSpace strategy_space(Strategy strategy, double lower, double upper);

/// Algorithm-1 objective: sample M pool images, attack the augmented
/// surrogate with MI-FGSM, return the mean attack success rate over the
/// test models (in [0,1]). The minimizer consumes its negation.
double objective(std::span<const double> p, const ObjectiveContext& ctx, Rng rng);

using ObjectiveFn = std::function<double(std::span<const double>, Rng)>;

struct EvalRecord {
  std::vector<double> point;
  double value = 0.0;
};

struct MinimizeResult {
  std::vector<double> best_point;
  double best_value = 0.0;
  std::vector<EvalRecord> trace;
};

/// n_init uniform evaluations followed by GP/EI-guided proposals. Returns the
/// best *observed* point (never a model extrapolation) plus the full trace.
MinimizeResult minimize(const ObjectiveFn& objective, const SearchSpace& space,
                        int64_t n_calls, int64_t n_init, Rng rng);

/// EI maximization over quasi-random candidates plus local refinement;
/// falls back to the maximum-variance candidate on a flat EI landscape.
std::vector<double> propose_next(const GpState& state, const SearchSpace& space,
                                 Rng& rng);

struct Phase1Record {
  std::string surrogate_id;
  Strategy strategy = Strategy::MHD;
  AugmentationSpec spec;
  double best_asr = 0.0;
  std::vector<EvalRecord> trace;  // stored as (params, asr)
};

struct Phase1Settings {
  int64_t n_calls = 50;
  int64_t n_init = 10;
  int64_t m_samples = 64;
  double space_lower = 0.001;
  double space_upper = 0.999;
  AttackConfig inner_attack;
  bool mfm_channel_axis = false;
  int threads = 0;  // 0 = hardware concurrency
};

/// Phase 1 of the attack: per surrogate and per strategy, one minimize run
/// against the other surrogates. Returns 3 specs per surrogate in strategy
/// order (MHD, ASS, MFM).
std::vector<Phase1Record> run_phase1(const std::vector<const ViTModel*>& surrogates,
                                     const std::vector<std::string>& surrogate_ids,
                                     const Tensor& pool_images,
                                     const std::vector<int64_t>& pool_labels,
                                     const Phase1Settings& settings, Rng rng);

std::string phase1_to_json(const std::vector<Phase1Record>& records);
std::vector<Phase1Record> phase1_from_json(const std::string& text);

}  // namespace vea
