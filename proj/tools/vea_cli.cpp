#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include "vea/experiment.hpp"
#include "vea/serialize.hpp"

namespace {

vea::ExperimentConfig load_config(const std::string& path, int threads_override) {
  vea::ExperimentConfig cfg;
  if (!path.empty() && vea::file_exists(path)) {
    cfg = vea::ExperimentConfig::from_json_text(vea::read_text_file(path));
  } else if (!path.empty()) {
    throw vea::ConfigError("config file not found: " + path);
  } else {
    cfg = vea::ExperimentConfig::defaults();
  }
  if (threads_override > 0) cfg.threads = threads_override;
  return cfg;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> seeds;
  std::string token;
  std::istringstream is(csv);
  while (std::getline(is, token, ',')) {
    if (!token.empty()) seeds.push_back(std::stoull(token));
  }
  if (seeds.empty()) seeds.push_back(0);
  return seeds;
}

void print_rows(const std::vector<vea::ResultRow>& rows) {
  std::printf("%-10s %-28s %-8s %8s %8s %6s\n", "variant", "mode", "target", "asr",
              "images", "seed");
  for (const auto& r : rows) {
    std::printf("%-10s %-28s %-8s %8.4f %8lld %6llu\n", r.attack_variant.c_str(),
                r.mode.c_str(), r.target_id.c_str(), r.asr,
                static_cast<long long>(r.n_images),
                static_cast<unsigned long long>(r.seed));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble transfer-attack laboratory for small Vision Transformers"};
  app.require_subcommand(1);

  std::string config_path;
  int threads = 0;
  app.add_option("--config", config_path, "experiment config JSON (defaults used if omitted)");
  app.add_option("--threads", threads, "worker threads (0 = hardware)");

  auto* init_cmd = app.add_subcommand("init-config", "write the default config to a file");
  std::string init_out = "config.json";
  init_cmd->add_option("--out", init_out, "where to write the config");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");

  auto* train_cmd = app.add_subcommand("train", "train the surrogate and target zoo");

  auto* optimize = app.add_subcommand("optimize", "phase 1: Bayesian optimization of augmentation parameters");

  auto* attack_cmd = app.add_subcommand("attack", "phase 2: run the ensemble attack and report transfer ASR");
  std::string variant_str = "MI";
  std::string mode_str = "viteattack";
  std::string attack_seeds = "0";
  bool save_adv = false;
  attack_cmd->add_option("--variant", variant_str, "I | MI | DI | TI (default MI)");
  attack_cmd->add_option("--mode", mode_str, "viteattack | ens_baseline | both");
  attack_cmd->add_option("--seeds", attack_seeds, "comma-separated replicate seeds");
  attack_cmd->add_flag("--save-adv", save_adv, "persist adversarial tensors to the output dir");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "report model accuracies and filtered split sizes");

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  std::string sweep = "modules";
  std::string ablate_seeds = "0";
  ablate->add_option("--sweep", sweep, "modules | strategies | b | q | loop");
  ablate->add_option("--seeds", ablate_seeds, "comma-separated replicate seeds");

  auto* report = app.add_subcommand("report", "summarize results.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init_cmd->parsed()) {
      vea::atomic_write_file(init_out, vea::ExperimentConfig::defaults().to_json_text());
      std::printf("wrote %s\n", init_out.c_str());
      return 0;
    }
    vea::ExperimentConfig cfg = load_config(config_path, threads);
    vea::Experiment exp(cfg);

    if (gen->parsed()) {
      vea::Dataset& data = exp.ensure_dataset();
      std::printf("dataset: %lld images at %s\n",
                  static_cast<long long>(data.images.dim(0)), exp.data_path().c_str());
      vea::atomic_write_file(cfg.output_dir + "/config_used.json", cfg.to_json_text());
      return 0;
    }
    if (train_cmd->parsed()) {
      exp.ensure_models();
      vea::Dataset& data = exp.ensure_dataset();
      vea::Tensor eval_images = data.gather_images(data.eval_candidate_idx);
      auto eval_labels = data.gather_labels(data.eval_candidate_idx);
      for (size_t i = 0; i < cfg.surrogates.size(); ++i) {
        double acc = vea::evaluate_accuracy(exp.surrogate_models()[i], eval_images, eval_labels);
        std::printf("surrogate %-4s accuracy %.4f\n", cfg.surrogates[i].id.c_str(), acc);
      }
      for (size_t i = 0; i < cfg.targets.size(); ++i) {
        double acc = vea::evaluate_accuracy(exp.target_models()[i], eval_images, eval_labels);
        std::printf("target    %-4s accuracy %.4f\n", cfg.targets[i].id.c_str(), acc);
      }
      return 0;
    }
    if (optimize->parsed()) {
      auto& records = exp.ensure_phase1();
      for (const auto& rec : records) {
        std::printf("%-4s %s best ASR %.4f  %s\n", rec.surrogate_id.c_str(),
                    vea::strategy_name(rec.strategy).c_str(), rec.best_asr,
                    rec.spec.to_string().c_str());
      }
      std::printf("phase-1 results at %s\n", exp.phase1_path().c_str());
      return 0;
    }
    if (attack_cmd->parsed()) {
      auto seeds = parse_seeds(attack_seeds);
      std::vector<vea::ResultRow> rows;
      std::vector<std::string> modes;
      if (mode_str == "both") {
        modes = {"viteattack", "ens_baseline"};
      } else {
        modes = {mode_str};
      }
      for (uint64_t seed : seeds) {
        for (const std::string& mode : modes) {
          vea::AttackJob job;
          job.variant = vea::variant_from_name(variant_str);
          if (mode == "viteattack") {
            job.modules = vea::AttackModules::for_mode(vea::EnsembleMode::viteattack);
          } else if (mode == "ens_baseline") {
            job.modules = vea::AttackModules::for_mode(vea::EnsembleMode::ens_baseline);
          } else {
            throw vea::ConfigError("unknown mode '" + mode + "'");
          }
          job.mode_tag = mode;
          job.seed = seed;
          vea::Tensor x_adv = exp.run_attack(job);
          if (save_adv) {
            std::ostringstream body;
            vea::write_tensor(body, x_adv);
            vea::atomic_write_file(cfg.output_dir + "/adv_" + variant_str + "_" + mode +
                                       "_seed" + std::to_string(seed) + ".bin",
                                   body.str());
          }
          auto job_rows = exp.evaluate_targets(job, x_adv);
          rows.insert(rows.end(), job_rows.begin(), job_rows.end());
        }
      }
      exp.write_results(rows);
      print_rows(rows);
      std::printf("rows written to %s\n", exp.results_path().c_str());
      return 0;
    }
    if (evaluate_cmd->parsed()) {
      exp.ensure_filtered();
      vea::Dataset& data = exp.ensure_dataset();
      vea::Tensor eval_images = data.gather_images(data.eval_candidate_idx);
      auto eval_labels = data.gather_labels(data.eval_candidate_idx);
      for (size_t i = 0; i < cfg.surrogates.size(); ++i) {
        std::printf("surrogate %-4s accuracy %.4f\n", cfg.surrogates[i].id.c_str(),
                    vea::evaluate_accuracy(exp.surrogate_models()[i], eval_images, eval_labels));
      }
      for (size_t i = 0; i < cfg.targets.size(); ++i) {
        std::printf("target    %-4s accuracy %.4f\n", cfg.targets[i].id.c_str(),
                    vea::evaluate_accuracy(exp.target_models()[i], eval_images, eval_labels));
      }
      std::printf("attack set: %lld images, BO pool: %lld images (all classified correctly)\n",
                  static_cast<long long>(exp.attack_set_images().dim(0)),
                  static_cast<long long>(exp.bo_pool_images().dim(0)));
      return 0;
    }
    if (ablate->parsed()) {
      auto rows = exp.run_ablation(sweep, parse_seeds(ablate_seeds));
      print_rows(rows);
      std::printf("rows written to %s\n", exp.results_path().c_str());
      return 0;
    }
    if (report->parsed()) {
      auto rows = vea::results_from_csv(vea::read_text_file(exp.results_path()));
      print_rows(rows);
      // Mean transfer ASR per (variant, mode, seed).
      std::vector<std::string> seen;
      std::printf("\n%-10s %-28s %6s %10s\n", "variant", "mode", "seed", "mean_asr");
      for (const auto& row : rows) {
        std::string key = row.attack_variant + "|" + row.mode + "|" + std::to_string(row.seed);
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(key);
        double total = 0.0;
        int count = 0;
        for (const auto& r : rows) {
          if (r.attack_variant == row.attack_variant && r.mode == row.mode &&
              r.seed == row.seed) {
            total += r.asr;
            ++count;
          }
        }
        std::printf("%-10s %-28s %6llu %10.4f\n", row.attack_variant.c_str(),
                    row.mode.c_str(), static_cast<unsigned long long>(row.seed),
                    total / count);
      }
      return 0;
    }
  } catch (const vea::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const vea::TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 3;
  } catch (const vea::InvariantError& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
