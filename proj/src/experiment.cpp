#include "vea/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "vea/ops.hpp"
#include "vea/parallel.hpp"
#include "vea/serialize.hpp"

namespace vea {

namespace {

// Master-stream tags.
constexpr uint64_t kDataTag = 1;
constexpr uint64_t kModelTag = 2;
constexpr uint64_t kPhase1Tag = 3;
constexpr uint64_t kAttackTag = 4;

nlohmann::json config_to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},     {"embed_dim", c.embed_dim},
          {"depth", c.depth},           {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

ViTConfig config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<int64_t>();
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.channels = j.at("channels").get<int64_t>();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.depth = j.at("depth").get<int64_t>();
  c.num_heads = j.at("num_heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  return c;
}

uint64_t fnv1a(const std::string& text, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  // Zoo: four surrogates with mildly distinct configs (depth 4/4/5/5, heads
  // 4/8) and four held-out targets including one wider model.
  auto vit = [](int64_t depth, int64_t heads, int64_t embed = 64) {
    ViTConfig c;
    c.depth = depth;
    c.num_heads = heads;
    c.embed_dim = embed;
    return c;
  };
  cfg.surrogates = {{"s0", vit(4, 4), 11}, {"s1", vit(4, 8), 12},
                    {"s2", vit(5, 4), 13}, {"s3", vit(5, 8), 14}};
  cfg.targets = {{"t0", vit(4, 4), 21}, {"t1", vit(5, 4), 22},
                 {"t2", vit(4, 8), 23}, {"t3", vit(4, 8, 96), 24}};
  return cfg;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  if (surrogates.size() < 2) throw ConfigError("config: need at least 2 surrogates");
  if (targets.empty()) throw ConfigError("config: need at least 1 target");
  std::vector<std::string> ids;
  for (const auto& m : surrogates) ids.push_back(m.id);
  for (const auto& m : targets) ids.push_back(m.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw ConfigError("config: surrogate and target ids must be disjoint and unique");
  }
  for (const auto& m : surrogates) m.config.validate();
  for (const auto& m : targets) m.config.validate();
  attack.validate();
  if (bayesopt.n_calls < 1 || bayesopt.n_init < 1 || bayesopt.n_init > bayesopt.n_calls) {
    throw ConfigError("config: bayesopt schedule invalid");
  }
  if (bayesopt.m_images < 1 || bayesopt.m_images > bo_pool_size) {
    throw ConfigError("config: bayesopt.m_images must be in [1, bo_pool_size]");
  }
  if (attack_eval_size < 1 || attack_eval_size > dataset.eval_candidates) {
    throw ConfigError("config: attack_eval_size exceeds eval candidates");
  }
  if (bo_pool_size < 1 || bo_pool_size > dataset.bo_candidates) {
    throw ConfigError("config: bo_pool_size exceeds bo candidates");
  }
  if (attack_chunk < 1) throw ConfigError("config: attack_chunk must be >= 1");
  if (output_dir.empty()) throw ConfigError("config: output_dir must be set");
}

std::string ExperimentConfig::to_json_text() const {
  nlohmann::json j;
  j["dataset"] = {{"image_size", dataset.image_size},
                  {"channels", dataset.channels},
                  {"num_classes", dataset.num_classes},
                  {"train_count", dataset.train_count},
                  {"eval_candidates", dataset.eval_candidates},
                  {"bo_candidates", dataset.bo_candidates},
                  {"noise_std", dataset.noise_std},
                  {"color_jitter", dataset.color_jitter}};
  auto models = nlohmann::json::array();
  for (const auto& m : surrogates) {
    models.push_back({{"id", m.id}, {"seed", m.seed}, {"config", config_to_json(m.config)}});
  }
  auto tmodels = nlohmann::json::array();
  for (const auto& m : targets) {
    tmodels.push_back({{"id", m.id}, {"seed", m.seed}, {"config", config_to_json(m.config)}});
  }
  j["models"] = {{"surrogates", models},
                 {"targets", tmodels},
                 {"train", {{"epochs", train.epochs},
                            {"batch_size", train.batch_size},
                            {"lr", train.lr},
                            {"momentum", train.momentum},
                            {"min_accuracy", train.min_accuracy}}}};
  j["attack"] = {{"epsilon", attack.epsilon},
                 {"iterations", attack.iterations},
                 {"q", attack.q},
                 {"mu", attack.mu},
                 {"loop", attack.loop},
                 {"b", attack.b},
                 {"di_prob", attack.di_prob},
                 {"di_scale_max", attack.di_scale_max},
                 {"ti_kernel_size", attack.ti_kernel_size},
                 {"ti_sigma", attack.ti_sigma},
                 {"chunk", attack_chunk},
                 {"eval_size", attack_eval_size}};
  j["bayesopt"] = {{"n_calls", bayesopt.n_calls},
                   {"n_init", bayesopt.n_init},
                   {"m_images", bayesopt.m_images},
                   {"space_lower", bayesopt.space_lower},
                   {"space_upper", bayesopt.space_upper},
                   {"pool_size", bo_pool_size}};
  j["output"] = {{"dir", output_dir}};
  j["master_seed"] = master_seed;
  j["threads"] = threads;
  j["mfm_channel_axis"] = mfm_channel_axis;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  ExperimentConfig cfg = defaults();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      if (d.contains("image_size")) cfg.dataset.image_size = d["image_size"].get<int64_t>();
      if (d.contains("channels")) cfg.dataset.channels = d["channels"].get<int64_t>();
      if (d.contains("num_classes")) cfg.dataset.num_classes = d["num_classes"].get<int64_t>();
      if (d.contains("train_count")) cfg.dataset.train_count = d["train_count"].get<int64_t>();
      if (d.contains("eval_candidates")) cfg.dataset.eval_candidates = d["eval_candidates"].get<int64_t>();
      if (d.contains("bo_candidates")) cfg.dataset.bo_candidates = d["bo_candidates"].get<int64_t>();
      if (d.contains("noise_std")) cfg.dataset.noise_std = d["noise_std"].get<double>();
      if (d.contains("color_jitter")) cfg.dataset.color_jitter = d["color_jitter"].get<double>();
    }
    if (j.contains("models")) {
      const auto& m = j["models"];
      auto parse_entries = [](const nlohmann::json& arr) {
        std::vector<ModelEntry> out;
        for (const auto& e : arr) {
          out.push_back({e.at("id").get<std::string>(),
                         config_from_json(e.at("config")),
                         e.at("seed").get<uint64_t>()});
        }
        return out;
      };
      if (m.contains("surrogates")) cfg.surrogates = parse_entries(m["surrogates"]);
      if (m.contains("targets")) cfg.targets = parse_entries(m["targets"]);
      if (m.contains("train")) {
        const auto& t = m["train"];
        if (t.contains("epochs")) cfg.train.epochs = t["epochs"].get<int64_t>();
        if (t.contains("batch_size")) cfg.train.batch_size = t["batch_size"].get<int64_t>();
        if (t.contains("lr")) cfg.train.lr = t["lr"].get<double>();
        if (t.contains("momentum")) cfg.train.momentum = t["momentum"].get<double>();
        if (t.contains("min_accuracy")) cfg.train.min_accuracy = t["min_accuracy"].get<double>();
      }
    }
    if (j.contains("attack")) {
      const auto& a = j["attack"];
      if (a.contains("epsilon")) cfg.attack.epsilon = a["epsilon"].get<double>();
      if (a.contains("iterations")) cfg.attack.iterations = a["iterations"].get<int64_t>();
      if (a.contains("q")) cfg.attack.q = a["q"].get<double>();
      if (a.contains("mu")) cfg.attack.mu = a["mu"].get<double>();
      if (a.contains("loop")) cfg.attack.loop = a["loop"].get<int64_t>();
      if (a.contains("b")) cfg.attack.b = a["b"].get<double>();
      if (a.contains("di_prob")) cfg.attack.di_prob = a["di_prob"].get<double>();
      if (a.contains("di_scale_max")) cfg.attack.di_scale_max = a["di_scale_max"].get<double>();
      if (a.contains("ti_kernel_size")) cfg.attack.ti_kernel_size = a["ti_kernel_size"].get<int64_t>();
      if (a.contains("ti_sigma")) cfg.attack.ti_sigma = a["ti_sigma"].get<double>();
      if (a.contains("chunk")) cfg.attack_chunk = a["chunk"].get<int64_t>();
      if (a.contains("eval_size")) cfg.attack_eval_size = a["eval_size"].get<int64_t>();
    }
    if (j.contains("bayesopt")) {
      const auto& b = j["bayesopt"];
      if (b.contains("n_calls")) cfg.bayesopt.n_calls = b["n_calls"].get<int64_t>();
      if (b.contains("n_init")) cfg.bayesopt.n_init = b["n_init"].get<int64_t>();
      if (b.contains("m_images")) cfg.bayesopt.m_images = b["m_images"].get<int64_t>();
      if (b.contains("space_lower")) cfg.bayesopt.space_lower = b["space_lower"].get<double>();
      if (b.contains("space_upper")) cfg.bayesopt.space_upper = b["space_upper"].get<double>();
      if (b.contains("pool_size")) cfg.bo_pool_size = b["pool_size"].get<int64_t>();
    }
    if (j.contains("output") && j["output"].contains("dir")) {
      cfg.output_dir = j["output"]["dir"].get<std::string>();
    }
    if (j.contains("master_seed")) cfg.master_seed = j["master_seed"].get<uint64_t>();
    if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
    if (j.contains("mfm_channel_axis")) cfg.mfm_channel_axis = j["mfm_channel_axis"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file unreadable: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string results_to_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "attack_variant,mode,target_id,asr,n_images,seed\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.attack_variant << "," << r.mode << "," << r.target_id << "," << r.asr
       << "," << r.n_images << "," << r.seed << "\n";
  }
  return os.str();
}

std::vector<ResultRow> results_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<ResultRow> rows;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;
    }
    std::istringstream ls(line);
    ResultRow r;
    std::string asr, n_images, seed;
    if (!std::getline(ls, r.attack_variant, ',') || !std::getline(ls, r.mode, ',') ||
        !std::getline(ls, r.target_id, ',') || !std::getline(ls, asr, ',') ||
        !std::getline(ls, n_images, ',') || !std::getline(ls, seed, ',')) {
      throw IoError("results csv: malformed line '" + line + "'");
    }
    r.asr = std::stod(asr);
    r.n_images = std::stoll(n_images);
    r.seed = std::stoull(seed);
    rows.push_back(std::move(r));
  }
  return rows;
}

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::filesystem::create_directories(cfg_.output_dir);
  std::filesystem::create_directories(cfg_.output_dir + "/models");
}

std::string Experiment::data_path() const { return cfg_.output_dir + "/data.bin"; }
std::string Experiment::model_path(const std::string& id) const {
  return cfg_.output_dir + "/models/" + id + ".ckpt";
}
std::string Experiment::phase1_path() const { return cfg_.output_dir + "/phase1.json"; }
std::string Experiment::results_path() const { return cfg_.output_dir + "/results.csv"; }

Dataset& Experiment::ensure_dataset() {
  if (data_) return *data_;
  if (file_exists(data_path())) {
    data_ = load_dataset(data_path());
  } else {
    data_ = make_dataset(cfg_.dataset, Rng(cfg_.master_seed).derive(kDataTag));
    save_dataset(*data_, data_path());
  }
  return *data_;
}

void Experiment::load_or_train_models() {
  Dataset& data = ensure_dataset();
  Tensor train_images = data.gather_images(data.train_idx);
  auto train_labels = data.gather_labels(data.train_idx);
  Tensor eval_images = data.gather_images(data.eval_candidate_idx);
  auto eval_labels = data.gather_labels(data.eval_candidate_idx);

  std::vector<ModelEntry> entries = cfg_.surrogates;
  entries.insert(entries.end(), cfg_.targets.begin(), cfg_.targets.end());
  std::vector<ViTModel> models(entries.size());
  Rng master(cfg_.master_seed);
  parallel_for_jobs(static_cast<int64_t>(entries.size()), cfg_.threads, [&](int64_t i) {
    const ModelEntry& entry = entries[static_cast<size_t>(i)];
    std::string path = model_path(entry.id);
    if (file_exists(path)) {
      ViTModel m = load_checkpoint(path);
      if (!(m.config == entry.config)) {
        throw ConfigError("checkpoint " + path + " does not match the configured model; "
                          "delete it and rerun the train stage");
      }
      models[static_cast<size_t>(i)] = std::move(m);
      return;
    }
    Rng rng = master.derive(kModelTag).derive(entry.seed);
    models[static_cast<size_t>(i)] =
        train_model(entry.config, train_images, train_labels, eval_images, eval_labels,
                    cfg_.train, rng);
    save_checkpoint(models[static_cast<size_t>(i)], path);
  });

  surrogate_models_.assign(std::make_move_iterator(models.begin()),
                           std::make_move_iterator(models.begin() + static_cast<std::ptrdiff_t>(cfg_.surrogates.size())));
  target_models_.assign(std::make_move_iterator(models.begin() + static_cast<std::ptrdiff_t>(cfg_.surrogates.size())),
                        std::make_move_iterator(models.end()));
  models_ready_ = true;
}

void Experiment::ensure_models() {
  if (!models_ready_) load_or_train_models();
}

std::string Experiment::splits_fingerprint() const {
  uint64_t h = fnv1a("splits-v1");
  std::vector<ModelEntry> entries = cfg_.surrogates;
  entries.insert(entries.end(), cfg_.targets.begin(), cfg_.targets.end());
  for (const auto& e : entries) {
    h = fnv1a(read_text_file(model_path(e.id) + ".manifest"), h);
  }
  h = fnv1a(std::to_string(cfg_.attack_eval_size), h);
  h = fnv1a(std::to_string(cfg_.bo_pool_size), h);
  return std::to_string(h);
}

void Experiment::ensure_filtered() {
  if (filtered_ready_) return;
  ensure_models();
  Dataset& data = ensure_dataset();

  std::string splits_path = cfg_.output_dir + "/splits.json";
  std::string fingerprint = splits_fingerprint();
  std::vector<int64_t> attack_idx, bo_idx;
  bool loaded = false;
  if (file_exists(splits_path)) {
    try {
      auto j = nlohmann::json::parse(read_text_file(splits_path));
      if (j.at("fingerprint").get<std::string>() == fingerprint) {
        attack_idx = j.at("attack_idx").get<std::vector<int64_t>>();
        bo_idx = j.at("bo_idx").get<std::vector<int64_t>>();
        loaded = true;
      }
    } catch (const std::exception&) {
      loaded = false;  // stale or unreadable cache: recompute below
    }
  }

  if (!loaded) {
    // The attack set must be classified correctly by every model; the BO pool
    // only by the surrogates (it never touches the targets).
    auto correct_mask = [&](const std::vector<int64_t>& candidates,
                            bool include_targets) {
      Tensor images = data.gather_images(candidates);
      auto labels = data.gather_labels(candidates);
      std::vector<bool> keep(candidates.size(), true);
      std::vector<const ViTModel*> models;
      for (const auto& m : surrogate_models_) models.push_back(&m);
      if (include_targets) {
        for (const auto& m : target_models_) models.push_back(&m);
      }
      const int64_t batch = 300;
      for (const ViTModel* model : models) {
        ViTModel view = detached_view(*model);
        for (int64_t start = 0; start < images.dim(0); start += batch) {
          int64_t count = std::min(batch, images.dim(0) - start);
          Tensor slice = slice_axis(images.detach(), 0, start, count);
          auto pred = argmax_rows(forward(view, slice));
          for (int64_t i = 0; i < count; ++i) {
            if (pred[static_cast<size_t>(i)] != labels[static_cast<size_t>(start + i)]) {
              keep[static_cast<size_t>(start + i)] = false;
            }
          }
        }
      }
      return keep;
    };

    auto pick = [&](const std::vector<int64_t>& candidates, const std::vector<bool>& keep,
                    int64_t want, const char* what) {
      std::vector<int64_t> out;
      for (size_t i = 0; i < candidates.size() && static_cast<int64_t>(out.size()) < want; ++i) {
        if (keep[i]) out.push_back(candidates[i]);
      }
      if (static_cast<int64_t>(out.size()) < want) {
        throw ConfigError(std::string("filtering produced only ") +
                          std::to_string(out.size()) + " of " + std::to_string(want) +
                          " " + what + " images; raise the candidate counts or "
                          "improve model accuracy (rerun gen-data/train)");
      }
      return out;
    };

    attack_idx = pick(data.eval_candidate_idx,
                      correct_mask(data.eval_candidate_idx, /*include_targets=*/true),
                      cfg_.attack_eval_size, "attack-eval");
    bo_idx = pick(data.bo_candidate_idx,
                  correct_mask(data.bo_candidate_idx, /*include_targets=*/false),
                  cfg_.bo_pool_size, "BO-pool");
    nlohmann::json j{{"fingerprint", fingerprint},
                     {"attack_idx", attack_idx},
                     {"bo_idx", bo_idx}};
    atomic_write_file(splits_path, j.dump());
  }

  attack_images_ = data.gather_images(attack_idx);
  attack_labels_ = data.gather_labels(attack_idx);
  bo_images_ = data.gather_images(bo_idx);
  bo_labels_ = data.gather_labels(bo_idx);
  filtered_ready_ = true;
}

std::vector<Phase1Record>& Experiment::ensure_phase1() {
  if (phase1_ready_) return phase1_;
  ensure_filtered();
  if (file_exists(phase1_path())) {
    phase1_ = phase1_from_json(read_text_file(phase1_path()));
    phase1_ready_ = true;
    return phase1_;
  }
  std::vector<const ViTModel*> surrogates;
  std::vector<std::string> ids;
  for (size_t i = 0; i < surrogate_models_.size(); ++i) {
    surrogates.push_back(&surrogate_models_[i]);
    ids.push_back(cfg_.surrogates[i].id);
  }
  Phase1Settings settings;
  settings.n_calls = cfg_.bayesopt.n_calls;
  settings.n_init = cfg_.bayesopt.n_init;
  settings.m_samples = cfg_.bayesopt.m_images;
  settings.space_lower = cfg_.bayesopt.space_lower;
  settings.space_upper = cfg_.bayesopt.space_upper;
  settings.inner_attack = cfg_.attack;
  settings.inner_attack.loop = 1;
  settings.mfm_channel_axis = cfg_.mfm_channel_axis;
  settings.threads = cfg_.threads;
  phase1_ = run_phase1(surrogates, ids, bo_images_, bo_labels_, settings,
                       Rng(cfg_.master_seed).derive(kPhase1Tag));
  atomic_write_file(phase1_path(), phase1_to_json(phase1_));
  phase1_ready_ = true;
  return phase1_;
}

std::vector<EnsembleMember> Experiment::members_for(const AttackJob& job) {
  ensure_models();
  std::vector<EnsembleMember> members;
  members.reserve(surrogate_models_.size());
  const bool need_specs = job.modules.augmentation;
  if (need_specs) ensure_phase1();
  for (size_t i = 0; i < surrogate_models_.size(); ++i) {
    EnsembleMember m;
    m.model = &surrogate_models_[i];
    if (need_specs) {
      for (const auto& rec : phase1_) {
        if (rec.surrogate_id != cfg_.surrogates[i].id) continue;
        if (!job.strategy_subset.empty() &&
            std::find(job.strategy_subset.begin(), job.strategy_subset.end(),
                      rec.strategy) == job.strategy_subset.end()) {
          continue;
        }
        m.specs.push_back(rec.spec);
      }
      if (m.specs.empty()) {
        throw ConfigError("no phase-1 specs for surrogate " + cfg_.surrogates[i].id +
                          "; run the optimize stage first");
      }
    }
    members.push_back(std::move(m));
  }
  return members;
}

Tensor Experiment::run_attack(const AttackJob& job) {
  return run_attack_with_cfg(job, cfg_.attack);
}

Tensor Experiment::run_attack_with_cfg(const AttackJob& job, const AttackConfig& attack_cfg) {
  ensure_filtered();
  auto members = members_for(job);
  int64_t n = attack_images_.dim(0);
  int64_t per = attack_images_.numel() / n;
  std::vector<double> adv(static_cast<size_t>(attack_images_.numel()));
  Rng attack_rng = Rng(cfg_.master_seed).derive(kAttackTag).derive(job.seed);
  int64_t n_chunks = (n + cfg_.attack_chunk - 1) / cfg_.attack_chunk;
  for (int64_t c = 0; c < n_chunks; ++c) {
    int64_t start = c * cfg_.attack_chunk;
    int64_t count = std::min(cfg_.attack_chunk, n - start);
    Tensor x = slice_axis(attack_images_.detach(), 0, start, count);
    std::span<const int64_t> y(attack_labels_.data() + start, static_cast<size_t>(count));
    Tensor x_adv = attack_batch_with_modules(members, x, y, attack_cfg, job.variant,
                                             job.modules, attack_rng.derive(static_cast<uint64_t>(c)),
                                             cfg_.mfm_channel_axis);
    std::copy(x_adv.data(), x_adv.data() + count * per,
              adv.begin() + static_cast<std::ptrdiff_t>(start * per));
  }
  return Tensor::from_vector(attack_images_.shape(), std::move(adv));
}

std::vector<ResultRow> Experiment::evaluate_targets(const AttackJob& job,
                                                    const Tensor& x_adv) {
  ensure_filtered();
  std::vector<ResultRow> rows;
  for (size_t t = 0; t < target_models_.size(); ++t) {
    ViTModel view = detached_view(target_models_[t]);
    auto pred = argmax_rows(forward(view, x_adv.detach()));
    int64_t wrong = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] != attack_labels_[i]) ++wrong;
    }
    ResultRow row;
    row.attack_variant = variant_name(job.variant);
    row.mode = job.mode_tag;
    row.target_id = cfg_.targets[t].id;
    row.asr = static_cast<double>(wrong) / static_cast<double>(pred.size());
    row.n_images = static_cast<int64_t>(pred.size());
    row.seed = job.seed;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> Experiment::white_box(const Tensor& x_adv) {
  ensure_filtered();
  std::vector<EnsembleMember> members;
  for (const auto& m : surrogate_models_) members.push_back({&m, {}});
  return white_box_asr(members, x_adv, attack_labels_);
}

std::vector<ResultRow> Experiment::run_experiment(
    const std::vector<AttackVariant>& variants, const std::vector<uint64_t>& seeds) {
  ensure_phase1();
  std::vector<AttackJob> jobs;
  for (AttackVariant v : variants) {
    for (uint64_t seed : seeds) {
      AttackJob full;
      full.variant = v;
      full.modules = AttackModules::for_mode(EnsembleMode::viteattack);
      full.mode_tag = "viteattack";
      full.seed = seed;
      jobs.push_back(full);
      AttackJob base;
      base.variant = v;
      base.modules = AttackModules::for_mode(EnsembleMode::ens_baseline);
      base.mode_tag = "ens_baseline";
      base.seed = seed;
      jobs.push_back(base);
    }
  }
  std::vector<std::vector<ResultRow>> per_job(jobs.size());
  parallel_for_jobs(static_cast<int64_t>(jobs.size()), cfg_.threads, [&](int64_t i) {
    Tensor x_adv = run_attack(jobs[static_cast<size_t>(i)]);
    per_job[static_cast<size_t>(i)] = evaluate_targets(jobs[static_cast<size_t>(i)], x_adv);
  });
  std::vector<ResultRow> rows;
  for (auto& r : per_job) rows.insert(rows.end(), r.begin(), r.end());
  write_results(rows);
  return rows;
}

std::vector<AttackJob> Experiment::ablation_jobs(const std::string& kind,
                                                 uint64_t seed) const {
  std::vector<AttackJob> jobs;
  auto push = [&](AttackJob j) {
    j.seed = seed;
    jobs.push_back(std::move(j));
  };
  if (kind == "modules") {
    for (int mask = 0; mask < 8; ++mask) {
      AttackJob j;
      j.modules.augmentation = (mask & 4) != 0;
      j.modules.reweighting = (mask & 2) != 0;
      j.modules.enlargement = (mask & 1) != 0;
      std::ostringstream tag;
      tag << "modules:aug" << (j.modules.augmentation ? "+" : "-") << "rw"
          << (j.modules.reweighting ? "+" : "-") << "enl"
          << (j.modules.enlargement ? "+" : "-");
      j.mode_tag = tag.str();
      push(std::move(j));
    }
  } else if (kind == "strategies") {
    AttackJob full;
    full.mode_tag = "strategies:full";
    push(full);
    const Strategy all[] = {Strategy::MHD, Strategy::ASS, Strategy::MFM};
    for (Strategy out : all) {
      AttackJob j;
      j.mode_tag = "strategies:loo-" + strategy_name(out);
      for (Strategy s : all) {
        if (s != out) j.strategy_subset.push_back(s);
      }
      push(std::move(j));
    }
    for (Strategy only : all) {
      AttackJob j;
      j.mode_tag = "strategies:only-" + strategy_name(only);
      j.strategy_subset = {only};
      push(std::move(j));
    }
  } else if (kind == "b" || kind == "q" || kind == "loop") {
    // These sweeps adjust the attack config per job; encoded in the tag and
    // applied by run_ablation.
    std::vector<double> values;
    if (kind == "b") values = {0.0, 1.0, 2.0, 3.0};
    if (kind == "q") values = {1.0, 2.0, 3.0, 5.0};
    if (kind == "loop") values = {1.0, 2.0, 3.0};
    for (double v : values) {
      AttackJob j;
      std::ostringstream tag;
      tag << kind << "=" << v;
      j.mode_tag = tag.str();
      push(std::move(j));
    }
  } else {
    throw ConfigError("unknown ablation kind '" + kind +
                      "' (expected modules|strategies|b|q|loop)");
  }
  return jobs;
}

std::vector<ResultRow> Experiment::run_ablation(const std::string& kind,
                                                const std::vector<uint64_t>& seeds) {
  ensure_phase1();
  struct Task {
    AttackJob job;
    AttackConfig cfg;
  };
  std::vector<Task> tasks;
  for (uint64_t seed : seeds) {
    for (AttackJob& job : ablation_jobs(kind, seed)) {
      Task t{job, cfg_.attack};
      if (kind == "b" || kind == "q" || kind == "loop") {
        double value = std::stod(job.mode_tag.substr(kind.size() + 1));
        if (kind == "b") t.cfg.b = value;
        if (kind == "q") t.cfg.q = value;
        if (kind == "loop") t.cfg.loop = static_cast<int64_t>(value);
      }
      tasks.push_back(std::move(t));
    }
  }
  std::vector<std::vector<ResultRow>> per_task(tasks.size());
  parallel_for_jobs(static_cast<int64_t>(tasks.size()), cfg_.threads, [&](int64_t i) {
    Tensor x_adv = run_attack_with_cfg(tasks[static_cast<size_t>(i)].job,
                                       tasks[static_cast<size_t>(i)].cfg);
    per_task[static_cast<size_t>(i)] =
        evaluate_targets(tasks[static_cast<size_t>(i)].job, x_adv);
  });
  std::vector<ResultRow> rows;
  for (auto& r : per_task) rows.insert(rows.end(), r.begin(), r.end());
  write_results(rows);
  return rows;
}

void Experiment::write_results(const std::vector<ResultRow>& rows) const {
  atomic_write_file(results_path(), results_to_csv(rows));
  // Per-(variant, mode, seed) mean transfer ASR summary.
  nlohmann::json summary = nlohmann::json::array();
  std::vector<std::string> seen;
  for (const auto& row : rows) {
    std::string key = row.attack_variant + "|" + row.mode + "|" + std::to_string(row.seed);
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    double total = 0.0;
    int64_t count = 0;
    for (const auto& r : rows) {
      if (r.attack_variant == row.attack_variant && r.mode == row.mode && r.seed == row.seed) {
        total += r.asr;
        ++count;
      }
    }
    summary.push_back({{"attack_variant", row.attack_variant},
                       {"mode", row.mode},
                       {"seed", row.seed},
                       {"mean_transfer_asr", total / static_cast<double>(count)},
                       {"targets", count}});
  }
  atomic_write_file(cfg_.output_dir + "/summary.json", summary.dump(2));
}

}  // namespace vea
