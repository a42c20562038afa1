#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vea/ensemble_attack.hpp"
#include "vea/ops.hpp"

using namespace vea;
using test::bitwise_equal;
using test::finite_difference_gradient;
using test::max_rel_error;
using test::random_tensor;
using test::to_vector;

namespace {

ViTConfig tiny_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.num_classes = 4;
  return c;
}

std::vector<AugmentationSpec> identity_specs() {
  return {AugmentationSpec::mhd(0.0), AugmentationSpec::ass(1.0, 0.0),
          AugmentationSpec::mfm(0.0)};
}

struct TinySetup {
  ViTModel m0, m1;
  Tensor x;
  std::vector<int64_t> y;
  TinySetup() {
    m0 = init_params(tiny_config(), Rng(3));
    m1 = init_params(tiny_config(), Rng(4));
    Rng rng(5);
    x = random_tensor({5, 3, 16, 16}, rng, 0.05, 0.95);
    y = {0, 1, 2, 3, 1};
  }
};

}  // namespace

TEST_CASE("reweight matches the hand-evaluated oracle") {
  std::vector<double> losses{1.0, 2.0};
  WeightVector w = reweight(losses, 2.0);
  // L_max = 2; ratios (2/1)^2 = 4 and (2/2)^2 = 1; weights 0.8 / 0.2.
  CHECK(w.w[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(w.w[1] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("reweight: b = 0 and equal losses give uniform weights") {
  std::vector<double> losses{0.3, 5.0, 1.7};
  WeightVector w = reweight(losses, 0.0);
  for (double v : w.w) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::vector<double> equal{2.2, 2.2, 2.2, 2.2};
  for (double b : {0.5, 1.0, 2.0, 4.0}) {
    WeightVector we = reweight(equal, b);
    for (double v : we.w) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("reweight properties: normalization, dominance, permutation equivariance") {
  Rng rng(7);
  for (int trial = 0; trial < 2000; ++trial) {
    size_t n = static_cast<size_t>(rng.uniform_int(2, 6));
    std::vector<double> losses(n);
    for (auto& l : losses) l = rng.uniform(0.0, 5.0);
    double b = rng.uniform(0.0, 4.0);
    WeightVector w = reweight(losses, b);
    double total = 0.0;
    for (double v : w.w) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-9);
  }

  // Lower loss -> strictly larger weight, for b > 0.
  std::vector<double> losses{0.5, 1.5, 1.0, 3.0};
  for (double b : {0.5, 1.0, 2.0, 4.0}) {
    WeightVector w = reweight(losses, b);
    for (size_t i = 0; i < losses.size(); ++i) {
      for (size_t j = 0; j < losses.size(); ++j) {
        if (losses[i] < losses[j]) CHECK(w.w[i] > w.w[j]);
      }
    }
  }

  // Permuting losses permutes weights identically.
  std::vector<double> base{0.4, 2.0, 1.1};
  std::vector<double> perm{1.1, 0.4, 2.0};
  WeightVector wb = reweight(base, 2.0);
  WeightVector wp = reweight(perm, 2.0);
  CHECK(wp.w[0] == doctest::Approx(wb.w[2]).epsilon(1e-15));
  CHECK(wp.w[1] == doctest::Approx(wb.w[0]).epsilon(1e-15));
  CHECK(wp.w[2] == doctest::Approx(wb.w[1]).epsilon(1e-15));

  // Near-zero loss hits the division guard rather than producing inf.
  WeightVector guarded = reweight(std::vector<double>{0.0, 1.0}, 2.0);
  CHECK(std::isfinite(guarded.w[0]));
  CHECK(guarded.w[0] > guarded.w[1]);
}

TEST_CASE("member_loss: identity specs at loop=1 give 3x the vanilla loss") {
  TinySetup s;
  EnsembleMember member{&s.m0, identity_specs()};
  Tensor x = s.x.clone();
  Tensor li = member_loss(member, x, s.y, 1, Rng(9));
  double vanilla = cross_entropy(forward(s.m0, x), s.y).item();
  CHECK(li.item() == doctest::Approx(3.0 * vanilla).epsilon(1e-14));
}

TEST_CASE("member_loss accumulates over loop passes with per-pass draws") {
  TinySetup s;
  EnsembleMember member{&s.m0, {AugmentationSpec::mhd(0.5), AugmentationSpec::ass(0.5, 0.3),
                                AugmentationSpec::mfm(0.6)}};
  Rng rng(11);
  Tensor two = member_loss(member, s.x, s.y, 2, rng);
  // Manual accumulation in the same (pass, variant) order with the same
  // derived streams.
  double expected = 0.0;
  for (int64_t pass = 0; pass < 2; ++pass) {
    Rng pass_rng = rng.derive(static_cast<uint64_t>(pass));
    for (size_t vi = 0; vi < member.specs.size(); ++vi) {
      AugmentedModel am = build(s.m0, member.specs[vi]);
      expected += cross_entropy(am.forward(s.x, pass_rng.derive(vi)), s.y).item();
    }
  }
  CHECK(two.item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("member_loss gradient passes finite differences with pinned draws") {
  TinySetup s;
  EnsembleMember member{&s.m0, {AugmentationSpec::mhd(0.4), AugmentationSpec::ass(0.6, 0.2),
                                AugmentationSpec::mfm(0.5)}};
  Rng rng(13);
  Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.1, 0.9, true);
  std::vector<int64_t> y{2};
  backward(member_loss(member, x, y, 2, Rng(77)));
  std::vector<double> an = to_vector(x.grad());
  auto fd = finite_difference_gradient(
      [&](const Tensor& t) {
        return member_loss(member, t.detach(), y, 2, Rng(77)).item();
      },
      x.detach());
  CHECK(max_rel_error(an, fd) < 1e-4);
}

TEST_CASE("ensemble driver with N=1, mu=0, q=1 reproduces hand-rolled I-FGSM bit-exactly") {
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 10;
  cfg.q = 1.0;
  cfg.mu = 0.0;
  cfg.loop = 1;
  cfg.b = 0.0;

  EnsembleSpec spec;
  spec.mode = EnsembleMode::ens_baseline;
  spec.members = {{&s.m0, {}}};
  Tensor driver_adv = attack_batch(spec, s.x, s.y, cfg, AttackVariant::I, Rng(15));

  // Hand-rolled Eq.-1 iteration: fresh forward/backward, sign step, explicit
  // projection. No attack-module plumbing involved.
  const double eps = cfg.epsilon, alpha = cfg.epsilon / 10.0;
  Tensor x_adv = s.x.clone();
  for (int t = 0; t < 10; ++t) {
    Tensor leaf = x_adv.clone();
    leaf.set_requires_grad(true);
    backward(cross_entropy(forward(s.m0, leaf), s.y));
    Tensor g = leaf.grad();
    std::vector<double> next(static_cast<size_t>(x_adv.numel()));
    for (int64_t i = 0; i < x_adv.numel(); ++i) {
      double step = g.data()[i] > 0 ? alpha : (g.data()[i] < 0 ? -alpha : 0.0);
      double v = x_adv.data()[i] + step;
      v = std::min(std::max(v, s.x.data()[i] - eps), s.x.data()[i] + eps);
      next[static_cast<size_t>(i)] = std::min(std::max(v, 0.0), 1.0);
    }
    x_adv = Tensor::from_vector(x_adv.shape(), std::move(next));
  }
  CHECK(bitwise_equal(driver_adv, x_adv));
}

TEST_CASE("ensemble driver with mu=1 matches a hand-rolled MI-FGSM oracle bit-exactly") {
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 10;
  cfg.q = 1.0;
  cfg.mu = 1.0;
  cfg.loop = 1;
  cfg.b = 0.0;

  EnsembleSpec spec;
  spec.mode = EnsembleMode::ens_baseline;
  spec.members = {{&s.m0, {}}};
  Tensor driver_adv = attack_batch(spec, s.x, s.y, cfg, AttackVariant::MI, Rng(17));

  const double eps = cfg.epsilon, alpha = cfg.epsilon / 10.0;
  int64_t bsz = s.x.dim(0), per = s.x.numel() / bsz;
  Tensor x_adv = s.x.clone();
  std::vector<double> momentum(static_cast<size_t>(s.x.numel()), 0.0);
  for (int t = 0; t < 10; ++t) {
    Tensor leaf = x_adv.clone();
    leaf.set_requires_grad(true);
    backward(cross_entropy(forward(s.m0, leaf), s.y));
    Tensor g = leaf.grad();
    // Per-image L1 normalization then momentum accumulation.
    for (int64_t b = 0; b < bsz; ++b) {
      double norm = 0.0;
      for (int64_t i = 0; i < per; ++i) norm += std::fabs(g.data()[b * per + i]);
      for (int64_t i = 0; i < per; ++i) {
        size_t idx = static_cast<size_t>(b * per + i);
        if (norm > 0.0) {
          momentum[idx] = 1.0 * momentum[idx] + g.data()[b * per + i] / norm;
        }
      }
    }
    std::vector<double> next(static_cast<size_t>(x_adv.numel()));
    for (int64_t i = 0; i < x_adv.numel(); ++i) {
      double m = momentum[static_cast<size_t>(i)];
      double step = m > 0 ? alpha : (m < 0 ? -alpha : 0.0);
      double v = x_adv.data()[i] + step;
      v = std::min(std::max(v, s.x.data()[i] - eps), s.x.data()[i] + eps);
      next[static_cast<size_t>(i)] = std::min(std::max(v, 0.0), 1.0);
    }
    x_adv = Tensor::from_vector(x_adv.shape(), std::move(next));
  }
  CHECK(bitwise_equal(driver_adv, x_adv));
}

TEST_CASE("identity-spec viteattack at b=0, loop=1, q=1, mu=0 equals the baseline") {
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 6;
  cfg.q = 1.0;
  cfg.mu = 0.0;
  cfg.loop = 1;
  cfg.b = 0.0;

  EnsembleSpec ens;
  ens.mode = EnsembleMode::ens_baseline;
  ens.members = {{&s.m0, {}}, {&s.m1, {}}};
  Tensor base = attack_batch(ens, s.x, s.y, cfg, AttackVariant::I, Rng(19));

  // Identity specs triple every member loss; the sign steps are unchanged.
  std::vector<EnsembleMember> members{{&s.m0, identity_specs()},
                                      {&s.m1, identity_specs()}};
  AttackModules modules;
  modules.augmentation = true;
  modules.reweighting = false;
  modules.enlargement = false;
  Tensor full = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::I,
                                          modules, Rng(19));
  CHECK(bitwise_equal(base, full));
}

TEST_CASE("trajectory is invariant to a common power-of-two loss scale") {
  // Power-of-two scales keep every float operation exact, so the check can
  // demand bitwise equality even with reweighting and momentum active.
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 5;
  cfg.loop = 2;

  std::vector<EnsembleMember> members{
      {&s.m0, {AugmentationSpec::mhd(0.3), AugmentationSpec::ass(0.7, 0.2),
               AugmentationSpec::mfm(0.4)}},
      {&s.m1, {AugmentationSpec::mhd(0.2), AugmentationSpec::ass(0.8, 0.1),
               AugmentationSpec::mfm(0.6)}}};
  AttackModules plain;
  Tensor a = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::MI,
                                       plain, Rng(21));
  for (double scale : {2.0, 0.5, 4.0}) {
    AttackModules scaled;
    scaled.loss_scale = scale;
    Tensor b = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::MI,
                                         scaled, Rng(21));
    CHECK(bitwise_equal(a, b));
  }
}

TEST_CASE("attack keeps the eps-ball and pixel-range invariants in every variant") {
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 4;
  cfg.loop = 2;
  std::vector<EnsembleMember> members{{&s.m0, identity_specs()}, {&s.m1, identity_specs()}};
  for (auto variant : {AttackVariant::I, AttackVariant::MI, AttackVariant::DI,
                       AttackVariant::TI}) {
    AttackModules modules;  // all on
    Tensor adv = attack_batch_with_modules(members, s.x, s.y, cfg, variant,
                                           modules, Rng(23));
    CHECK(linf_distance(adv, s.x) <= cfg.epsilon + 1e-9);
    for (int64_t i = 0; i < adv.numel(); ++i) {
      CHECK(adv.data()[i] >= 0.0);
      CHECK(adv.data()[i] <= 1.0);
    }
  }
}

TEST_CASE("attack is bit-reproducible under a fixed seed") {
  TinySetup s;
  AttackConfig cfg;
  cfg.iterations = 3;
  cfg.loop = 2;
  std::vector<EnsembleMember> members{
      {&s.m0, {AugmentationSpec::mhd(0.4), AugmentationSpec::ass(0.5, 0.3),
               AugmentationSpec::mfm(0.5)}},
      {&s.m1, {AugmentationSpec::mhd(0.1), AugmentationSpec::ass(0.9, 0.05),
               AugmentationSpec::mfm(0.2)}}};
  AttackModules modules;
  Tensor a = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::DI,
                                       modules, Rng(29));
  Tensor b = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::DI,
                                       modules, Rng(29));
  CHECK(bitwise_equal(a, b));
  Tensor c = attack_batch_with_modules(members, s.x, s.y, cfg, AttackVariant::DI,
                                       modules, Rng(30));
  CHECK_FALSE(bitwise_equal(a, c));
}

TEST_CASE("white_box_asr definition checks") {
  TinySetup s;
  std::vector<EnsembleMember> members{{&s.m0, {}}, {&s.m1, {}}};
  // Labels set to each model's own predictions give ASR exactly 0 / exactly 1.
  auto pred0 = argmax_rows(forward(s.m0, s.x));
  std::vector<double> asr = white_box_asr(members, s.x, pred0);
  CHECK(asr[0] == 0.0);

  std::vector<int64_t> wrong(pred0.size());
  for (size_t i = 0; i < wrong.size(); ++i) wrong[i] = (pred0[i] + 1) % 4;
  asr = white_box_asr(members, s.x, wrong);
  CHECK(asr[0] == 1.0);
}

TEST_CASE("ensemble spec validation") {
  TinySetup s;
  EnsembleSpec empty;
  CHECK_THROWS_AS(empty.validate(), ConfigError);

  EnsembleSpec two_specs;
  two_specs.mode = EnsembleMode::viteattack;
  two_specs.members = {{&s.m0, {AugmentationSpec::mhd(0.1), AugmentationSpec::mfm(0.2)}}};
  CHECK_THROWS_AS(two_specs.validate(), ConfigError);

  EnsembleSpec ok;
  ok.mode = EnsembleMode::viteattack;
  ok.members = {{&s.m0, identity_specs()}};
  CHECK_NOTHROW(ok.validate());
}
