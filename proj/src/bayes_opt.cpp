#include "vea/bayes_opt.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include <json.hpp>

#include "vea/ensemble_attack.hpp"
#include "vea/ops.hpp"
#include "vea/parallel.hpp"

namespace vea {

void SearchSpace::validate() const {
  if (dims.empty()) throw ConfigError("SearchSpace: no dimensions");
  for (const auto& d : dims) {
    if (!(d.lower < d.upper)) {
      throw ConfigError("SearchSpace: dim '" + d.name + "' needs lower < upper");
    }
    if (d.lower < 0.0 || d.upper > 1.0) {
      throw ConfigError("SearchSpace: dim '" + d.name + "' must lie within [0,1]");
    }
  }
}

AugmentationSpec spec_from_params(Strategy strategy, std::span<const double> p) {
  switch (strategy) {
    case Strategy::MHD:
      if (p.size() != 1) throw ConfigError("MHD expects 1 parameter");
      return AugmentationSpec::mhd(p[0]);
    case Strategy::ASS:
      if (p.size() != 2) throw ConfigError("ASS expects 2 parameters");
      return AugmentationSpec::ass(p[0], p[1]);
    case Strategy::MFM:
      if (p.size() != 1) throw ConfigError("MFM expects 1 parameter");
      return AugmentationSpec::mfm(p[0]);
  }
  throw ConfigError("unknown strategy");
}

SearchSpace strategy_space(Strategy strategy, double lower, double upper) {
  SearchSpace space;
  switch (strategy) {
    case Strategy::MHD:
      space.dims = {{"tau", lower, upper}};
      break;
    case Strategy::ASS:
      space.dims = {{"s", lower, upper}, {"xi", lower, upper}};
      break;
    case Strategy::MFM:
      space.dims = {{"rho", lower, upper}};
      break;
  }
  space.validate();
  return space;
}

double objective(std::span<const double> p, const ObjectiveContext& ctx, Rng rng) {
  if (ctx.surrogate == nullptr || ctx.pool_images == nullptr || ctx.pool_labels == nullptr) {
    throw ConfigError("objective: incomplete context");
  }
  if (ctx.test_models.empty()) throw ConfigError("objective: no test models");
  int64_t pool = ctx.pool_images->dim(0);
  if (ctx.m_samples > pool) {
    throw ConfigError("objective: M = " + std::to_string(ctx.m_samples) +
                      " exceeds pool size " + std::to_string(pool));
  }

  // 1. Sample M attack images from the BO pool.
  auto indices = rng.sample_without_replacement(pool, ctx.m_samples);
  int64_t ch = ctx.pool_images->dim(1), h = ctx.pool_images->dim(2), w = ctx.pool_images->dim(3);
  int64_t per = ch * h * w;
  std::vector<double> batch(static_cast<size_t>(ctx.m_samples * per));
  std::vector<int64_t> labels(static_cast<size_t>(ctx.m_samples));
  const double* src = ctx.pool_images->data();
  for (int64_t i = 0; i < ctx.m_samples; ++i) {
    int64_t idx = indices[static_cast<size_t>(i)];
    std::copy(src + idx * per, src + (idx + 1) * per,
              batch.begin() + static_cast<std::ptrdiff_t>(i * per));
    labels[static_cast<size_t>(i)] = (*ctx.pool_labels)[static_cast<size_t>(idx)];
  }
  Tensor x = Tensor::from_vector({ctx.m_samples, ch, h, w}, std::move(batch));

  // 2-3. Augment the surrogate and run plain MI-FGSM on it (single model,
  // single inference per iteration, alpha = eps/T).
  AugmentationSpec spec = spec_from_params(ctx.strategy, p);
  std::vector<EnsembleMember> members{{ctx.surrogate, {spec}}};
  AttackModules modules;
  modules.augmentation = true;
  modules.reweighting = false;
  modules.enlargement = false;
  AttackConfig cfg = ctx.inner_attack;
  cfg.loop = 1;
  Tensor x_adv = attack_batch_with_modules(members, x, labels, cfg, AttackVariant::MI,
                                           modules, rng.derive(1), ctx.mfm_channel_axis);

  // 4. Average attack success rate over the test models.
  double asr_sum = 0.0;
  for (const ViTModel* model : ctx.test_models) {
    auto pred = argmax_rows(forward(*model, x_adv));
    int64_t wrong = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] != labels[i]) ++wrong;
    }
    asr_sum += static_cast<double>(wrong) / static_cast<double>(pred.size());
  }
  return asr_sum / static_cast<double>(ctx.test_models.size());
}

namespace {

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13};

double halton(int64_t index, int base) {
  double f = 1.0, r = 0.0;
  int64_t i = index;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

double clamp_to_dim(double v, const SearchSpace::Dim& d) {
  return std::min(std::max(v, d.lower), d.upper);
}

}  // namespace

std::vector<double> propose_next(const GpState& state, const SearchSpace& space,
                                 Rng& rng) {
  if (!state.fitted) throw ContractError("propose_next: fit the GP first");
  space.validate();
  size_t dim = space.rank();
  double best_observed = *std::min_element(state.values.begin(), state.values.end());

  // Randomly shifted Halton candidates.
  std::vector<double> shift(dim);
  for (auto& s : shift) s = rng.next_double();
  const int64_t kCandidates = 1024;
  std::vector<double> best_point(dim), var_point(dim);
  double best_ei = -1.0, best_var = -1.0;
  std::vector<double> x(dim);
  for (int64_t c = 0; c < kCandidates; ++c) {
    for (size_t d = 0; d < dim; ++d) {
      double u = halton(c + 1, kPrimes[d % 6]) + shift[d];
      u -= std::floor(u);
      x[d] = space.dims[d].lower + u * (space.dims[d].upper - space.dims[d].lower);
    }
    GpPosterior post = gp_posterior(state, x);
    double ei = expected_improvement(post.mean, post.var, best_observed);
    if (ei > best_ei) {
      best_ei = ei;
      best_point = x;
    }
    if (post.var > best_var) {
      best_var = post.var;
      var_point = x;
    }
  }

  // Flat EI landscape: explore where the model is least certain.
  bool fallback = !(best_ei > 1e-16);
  std::vector<double> current = fallback ? var_point : best_point;
  auto score = [&](const std::vector<double>& p) {
    GpPosterior post = gp_posterior(state, p);
    return fallback ? post.var
                    : expected_improvement(post.mean, post.var, best_observed);
  };
  double current_score = score(current);
  for (double step : {0.08, 0.03, 0.01, 0.004}) {
    for (size_t d = 0; d < dim; ++d) {
      for (double dir : {+1.0, -1.0}) {
        std::vector<double> trial = current;
        double width = space.dims[d].upper - space.dims[d].lower;
        trial[d] = clamp_to_dim(trial[d] + dir * step * width, space.dims[d]);
        double s = score(trial);
        if (s > current_score) {
          current_score = s;
          current = trial;
        }
      }
    }
  }
  return current;
}

MinimizeResult minimize(const ObjectiveFn& fn, const SearchSpace& space,
                        int64_t n_calls, int64_t n_init, Rng rng) {
  space.validate();
  if (n_calls < 1) throw ConfigError("minimize: n_calls must be >= 1");
  if (n_init > n_calls) throw ConfigError("minimize: n_init must be <= n_calls");
  if (n_init < 1) throw ConfigError("minimize: n_init must be >= 1");
  if (n_calls > n_init && n_init < 2) {
    throw ConfigError("minimize: GP-guided phase needs n_init >= 2");
  }

  MinimizeResult result;
  GpState state;
  Rng point_rng = rng.derive(0);
  auto evaluate = [&](std::vector<double> point, int64_t call) {
    double value = fn(point, rng.derive(1000 + static_cast<uint64_t>(call)));
    state.add_observation(point, value);
    result.trace.push_back({std::move(point), value});
  };

  for (int64_t c = 0; c < n_init; ++c) {
    std::vector<double> p(space.rank());
    for (size_t d = 0; d < space.rank(); ++d) {
      p[d] = point_rng.uniform(space.dims[d].lower, space.dims[d].upper);
    }
    evaluate(std::move(p), c);
  }
  for (int64_t c = n_init; c < n_calls; ++c) {
    gp_fit(state);
    evaluate(propose_next(state, space, point_rng), c);
  }

  size_t best = 0;
  for (size_t i = 1; i < result.trace.size(); ++i) {
    if (result.trace[i].value < result.trace[best].value) best = i;
  }
  result.best_point = result.trace[best].point;
  result.best_value = result.trace[best].value;
  return result;
}

std::vector<Phase1Record> run_phase1(const std::vector<const ViTModel*>& surrogates,
                                     const std::vector<std::string>& surrogate_ids,
                                     const Tensor& pool_images,
                                     const std::vector<int64_t>& pool_labels,
                                     const Phase1Settings& settings, Rng rng) {
  if (surrogates.size() < 2) {
    throw ConfigError("run_phase1: need at least 2 surrogates (the test set must be non-empty)");
  }
  if (surrogates.size() != surrogate_ids.size()) {
    throw ConfigError("run_phase1: id count mismatch");
  }
  const Strategy kStrategies[] = {Strategy::MHD, Strategy::ASS, Strategy::MFM};
  int64_t n_jobs = static_cast<int64_t>(surrogates.size()) * 3;
  std::vector<Phase1Record> records(static_cast<size_t>(n_jobs));

  parallel_for_jobs(n_jobs, settings.threads, [&](int64_t job) {
    int64_t si = job / 3;
    Strategy strategy = kStrategies[job % 3];
    ObjectiveContext ctx;
    ctx.strategy = strategy;
    ctx.surrogate = surrogates[static_cast<size_t>(si)];
    for (size_t j = 0; j < surrogates.size(); ++j) {
      if (static_cast<int64_t>(j) != si) ctx.test_models.push_back(surrogates[j]);
    }
    ctx.pool_images = &pool_images;
    ctx.pool_labels = &pool_labels;
    ctx.m_samples = settings.m_samples;
    ctx.inner_attack = settings.inner_attack;
    ctx.mfm_channel_axis = settings.mfm_channel_axis;

    SearchSpace space = strategy_space(strategy, settings.space_lower, settings.space_upper);
    ObjectiveFn fn = [&ctx](std::span<const double> p, Rng eval_rng) {
      return -objective(p, ctx, eval_rng);  // minimize the negated ASR
    };
    MinimizeResult res = minimize(fn, space, settings.n_calls, settings.n_init,
                                  rng.derive(static_cast<uint64_t>(job)));

    Phase1Record rec;
    rec.surrogate_id = surrogate_ids[static_cast<size_t>(si)];
    rec.strategy = strategy;
    rec.spec = spec_from_params(strategy, res.best_point);
    rec.best_asr = -res.best_value;
    rec.trace.reserve(res.trace.size());
    for (const auto& e : res.trace) rec.trace.push_back({e.point, -e.value});
    records[static_cast<size_t>(job)] = std::move(rec);
  });
  return records;
}

std::string phase1_to_json(const std::vector<Phase1Record>& records) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& rec : records) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& e : rec.trace) {
      trace.push_back({{"params", e.point}, {"asr", e.value}});
    }
    nlohmann::json spec;
    spec["strategy"] = strategy_name(rec.strategy);
    switch (rec.strategy) {
      case Strategy::MHD: spec["tau"] = rec.spec.tau; break;
      case Strategy::ASS:
        spec["s"] = rec.spec.s;
        spec["xi"] = rec.spec.xi;
        break;
      case Strategy::MFM: spec["rho"] = rec.spec.rho; break;
    }
    out.push_back({{"surrogate_id", rec.surrogate_id},
                   {"strategy", strategy_name(rec.strategy)},
                   {"spec", spec},
                   {"best_asr", rec.best_asr},
                   {"trace", trace}});
  }
  return out.dump(2);
}

std::vector<Phase1Record> phase1_from_json(const std::string& text) {
  std::vector<Phase1Record> records;
  nlohmann::json in;
  try {
    in = nlohmann::json::parse(text);
    for (const auto& r : in) {
      Phase1Record rec;
      rec.surrogate_id = r.at("surrogate_id").get<std::string>();
      rec.strategy = strategy_from_name(r.at("strategy").get<std::string>());
      const auto& spec = r.at("spec");
      switch (rec.strategy) {
        case Strategy::MHD:
          rec.spec = AugmentationSpec::mhd(spec.at("tau").get<double>());
          break;
        case Strategy::ASS:
          rec.spec = AugmentationSpec::ass(spec.at("s").get<double>(),
                                           spec.at("xi").get<double>());
          break;
        case Strategy::MFM:
          rec.spec = AugmentationSpec::mfm(spec.at("rho").get<double>());
          break;
      }
      rec.best_asr = r.at("best_asr").get<double>();
      for (const auto& e : r.at("trace")) {
        rec.trace.push_back({e.at("params").get<std::vector<double>>(),
                             e.at("asr").get<double>()});
      }
      records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("phase-1 file unreadable: ") + e.what());
  }
  return records;
}

}  // namespace vea
