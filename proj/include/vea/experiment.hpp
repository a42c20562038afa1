#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vea/attacks.hpp"
#include "vea/bayes_opt.hpp"
#include "vea/dataset.hpp"
#include "vea/ensemble_attack.hpp"
#include "vea/train.hpp"
#include "vea/vit.hpp"

namespace vea {

struct ModelEntry {
  std::string id;
  ViTConfig config;
  uint64_t seed = 0;
};

struct BayesOptConfig {
  int64_t n_calls = 50;
  int64_t n_init = 10;
  int64_t m_images = 64;
  double space_lower = 0.001;
  double space_upper = 0.999;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<ModelEntry> surrogates;
  std::vector<ModelEntry> targets;
  TrainHyper train;
  AttackConfig attack;
  BayesOptConfig bayesopt;
  int64_t attack_eval_size = 200;
  int64_t bo_pool_size = 800;
  int64_t attack_chunk = 50;
  bool mfm_channel_axis = false;
  std::string output_dir = "out";
  uint64_t master_seed = 2025;
  int threads = 0;  // 0 = hardware concurrency

  static ExperimentConfig defaults();
  static ExperimentConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  void validate() const;
};

struct ResultRow {
  std::string attack_variant;
  std::string mode;
  std::string target_id;
  double asr = 0.0;
  int64_t n_images = 0;
  uint64_t seed = 0;
};

std::string results_to_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> results_from_csv(const std::string& text);

/// One attack execution: variant, module switches, optional strategy subset,
/// and the replicate seed that keys the attack's random streams.
struct AttackJob {
  AttackVariant variant = AttackVariant::MI;
  AttackModules modules;
  std::string mode_tag = "viteattack";
  uint64_t seed = 0;
  // Strategies the members keep; empty = all three.
  std::vector<Strategy> strategy_subset;
};

/// Orchestrates dataset, model zoo, filtering, phase 1 and phase 2 around an
/// output directory, caching every stage on disk.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }

  Dataset& ensure_dataset();
  /// Loads or trains every zoo model (training jobs run in parallel).
  void ensure_models();
  /// Builds the filtered attack set and BO pool (cached in splits.json).
  void ensure_filtered();
  std::vector<Phase1Record>& ensure_phase1();

  const std::vector<ViTModel>& surrogate_models() const { return surrogate_models_; }
  const std::vector<ViTModel>& target_models() const { return target_models_; }
  const Tensor& attack_set_images() const { return attack_images_; }
  const std::vector<int64_t>& attack_set_labels() const { return attack_labels_; }
  const Tensor& bo_pool_images() const { return bo_images_; }
  const std::vector<int64_t>& bo_pool_labels() const { return bo_labels_; }

  /// Ensemble members for a job (phase-1 specs filtered by the subset).
  std::vector<EnsembleMember> members_for(const AttackJob& job);

  /// Runs the chunked phase-2 attack over the full attack set.
  Tensor run_attack(const AttackJob& job);

  /// Transfer rows: ASR of `x_adv` on every target model.
  std::vector<ResultRow> evaluate_targets(const AttackJob& job, const Tensor& x_adv);

  /// White-box ASR per surrogate for an adversarial batch.
  std::vector<double> white_box(const Tensor& x_adv);

  /// Full pipeline: phase 1 (cached) + phase 2 for each variant x mode x seed;
  /// writes results.csv and summary.json. Returns all rows.
  std::vector<ResultRow> run_experiment(const std::vector<AttackVariant>& variants,
                                        const std::vector<uint64_t>& seeds);

  /// Ablation grids: kind is one of "modules", "strategies", "b", "q", "loop".
  std::vector<ResultRow> run_ablation(const std::string& kind,
                                      const std::vector<uint64_t>& seeds);

  std::string data_path() const;
  std::string model_path(const std::string& id) const;
  std::string phase1_path() const;
  std::string results_path() const;

  /// Builds the standard job list for an ablation kind (MI variant).
  std::vector<AttackJob> ablation_jobs(const std::string& kind, uint64_t seed) const;

  void write_results(const std::vector<ResultRow>& rows) const;

 private:
  void load_or_train_models();
  std::string splits_fingerprint() const;
  Tensor run_attack_with_cfg(const AttackJob& job, const AttackConfig& attack_cfg);

  ExperimentConfig cfg_;
  std::optional<Dataset> data_;
  std::vector<ViTModel> surrogate_models_;
  std::vector<ViTModel> target_models_;
  bool models_ready_ = false;
  Tensor attack_images_;
  std::vector<int64_t> attack_labels_;
  Tensor bo_images_;
  std::vector<int64_t> bo_labels_;
  bool filtered_ready_ = false;
  std::vector<Phase1Record> phase1_;
  bool phase1_ready_ = false;
};

}  // namespace vea
