#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vea/augmentation.hpp"
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

}  // namespace

TEST_CASE("spec validation and identity detection") {
  CHECK_THROWS_AS(AugmentationSpec::mhd(-0.1), ConfigError);
  CHECK_THROWS_AS(AugmentationSpec::mhd(1.5), ConfigError);
  CHECK_THROWS_AS(AugmentationSpec::ass(0.0, 0.2), ConfigError);
  CHECK_THROWS_AS(AugmentationSpec::mfm(1.0001), ConfigError);
  CHECK(AugmentationSpec::mhd(0.0).is_identity());
  CHECK(AugmentationSpec::ass(1.0, 0.0).is_identity());
  CHECK(AugmentationSpec::mfm(0.0).is_identity());
  CHECK_FALSE(AugmentationSpec::mhd(0.2).is_identity());
}

TEST_CASE("identity limits reproduce the vanilla forward bitwise") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(3));
  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    Tensor x = random_tensor({4, 3, 16, 16}, rng, 0, 1);
    Tensor plain = forward(model, x);
    for (auto spec : {AugmentationSpec::mhd(0.0), AugmentationSpec::ass(1.0, 0.0),
                      AugmentationSpec::mfm(0.0)}) {
      AugmentedModel am = build(model, spec);
      CHECK(bitwise_equal(am.forward(x, Rng(trial)), plain));
    }
  }
}

TEST_CASE("mhd tau=1 zeroes every attention matrix") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(7));
  Rng rng(9);
  Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  // Wrap the MHD hook with a spy that checks what the value path receives.
  AttentionHook inner = mhd_hook(1.0, Rng(1));
  double worst = -1.0;
  InterceptorSet hooks;
  hooks.attention_hook = [&](const Tensor& t, int64_t block) {
    Tensor y = inner(t, block);
    worst = std::max(worst, max_abs(y));
    return y;
  };
  Tensor out = forward(model, x, hooks);
  CHECK(worst == 0.0);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out.data()[i]));
}

TEST_CASE("mhd empirical drop rate matches Bernoulli(tau)") {
  // 4 heads x 4 blocks per pass, 10000 passes at tau = 0.5.
  const double tau = 0.5;
  Rng rng(11);
  Tensor scores = Tensor::full({1, 4, 3, 3}, 1.0);
  int64_t dropped = 0, total = 0;
  for (int pass = 0; pass < 10000; ++pass) {
    AttentionHook hook = mhd_hook(tau, rng.derive(static_cast<uint64_t>(pass)));
    for (int64_t block = 0; block < 4; ++block) {
      Tensor out = hook(scores, block);
      for (int64_t h = 0; h < 4; ++h) {
        total += 1;
        if (out.at({0, h, 0, 0}) == 0.0) dropped += 1;
      }
    }
  }
  double rate = static_cast<double>(dropped) / static_cast<double>(total);
  CHECK(rate == doctest::Approx(tau).epsilon(0.04));  // 0.5 +- 0.02
}

TEST_CASE("ass scaling: deterministic halving and factor statistics") {
  Tensor scores = Tensor::full({1, 2, 4, 4}, 1.0);
  AttentionHook halve = ass_hook(0.5, 0.0, Rng(1));
  Tensor out = halve(scores, 0);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.5);

  // Factors ~ U[0.2, 0.8]: mean over ~1e6 draws within 0.005 of 0.5.
  Rng rng(13);
  double total = 0.0;
  int64_t count = 0;
  for (int pass = 0; pass < 1000; ++pass) {
    AttentionHook hook = ass_hook(0.5, 0.3, rng.derive(static_cast<uint64_t>(pass)));
    for (int64_t block = 0; block < 2; ++block) {
      Tensor o = hook(scores, block);
      const double* p = o.data();
      for (int64_t i = 0; i < o.numel(); ++i) {
        total += p[i];
        ++count;
      }
    }
  }
  CHECK(count >= 64000);
  CHECK(total / static_cast<double>(count) == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("ass interval clamps at zero") {
  // s - xi < 0 must clamp the factor interval to [0, s + xi].
  Tensor scores = Tensor::full({1, 1, 8, 8}, 1.0);
  Rng rng(17);
  double lo = 1e9, hi = -1e9;
  for (int pass = 0; pass < 500; ++pass) {
    AttentionHook hook = ass_hook(0.1, 0.6, rng.derive(static_cast<uint64_t>(pass)));
    Tensor o = hook(scores, 0);
    for (int64_t i = 0; i < o.numel(); ++i) {
      lo = std::min(lo, o.data()[i]);
      hi = std::max(hi, o.data()[i]);
    }
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 0.7 + 1e-12);
}

TEST_CASE("mfm preserves per-channel token sums exactly") {
  Rng rng(19);
  for (double rho : {0.25, 0.6, 1.0}) {
    Tensor m = random_tensor({2, 7, 5}, rng, -2, 2);
    MlpHook hook = mfm_hook(rho, rng.derive(static_cast<uint64_t>(rho * 100)));
    Tensor out = hook(m, 0);
    REQUIRE(out.shape() == m.shape());
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t d = 0; d < 5; ++d) {
        double before = 0.0, after = 0.0;
        for (int64_t t = 0; t < 7; ++t) {
          before += m.at({b, t, d});
          after += out.at({b, t, d});
        }
        CHECK(std::fabs(before - after) <= 1e-12);
      }
    }
  }
}

TEST_CASE("mfm identity cases") {
  Rng rng(23);
  Tensor m = random_tensor({2, 6, 4}, rng, 0.1, 2.0);
  MlpHook zero = mfm_hook(0.0, Rng(1));
  CHECK(bitwise_equal(zero(m, 0), m));

  // With a single token the only permutation is the identity, so rho = 1
  // must reproduce the input.
  Tensor single = random_tensor({3, 1, 5}, rng, 0.1, 2.0);
  MlpHook full = mfm_hook(1.0, Rng(2));
  Tensor out = full(single, 0);
  for (int64_t i = 0; i < out.numel(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(single.data()[i]).epsilon(1e-15));
  }
}

TEST_CASE("mfm channel-axis switch permutes channels instead of tokens") {
  Rng rng(27);
  Tensor m = random_tensor({1, 4, 6}, rng, -1, 1);
  MlpHook hook = mfm_hook(1.0, Rng(5), /*channel_axis=*/true);
  Tensor out = hook(m, 0);
  // Token-sums over the channel axis are preserved per token.
  for (int64_t t = 0; t < 4; ++t) {
    double before = 0.0, after = 0.0;
    for (int64_t d = 0; d < 6; ++d) {
      before += m.at({0, t, d});
      after += out.at({0, t, d});
    }
    CHECK(before == doctest::Approx(after).epsilon(1e-12));
  }
}

TEST_CASE("randomness contract: pinned streams replay, advancing streams differ") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(31));
  Rng rng(33);
  Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  for (auto spec : {AugmentationSpec::mhd(0.4), AugmentationSpec::ass(0.6, 0.3),
                    AugmentationSpec::mfm(0.7)}) {
    AugmentedModel am = build(model, spec);
    Tensor a = am.forward(x, Rng(100));
    Tensor b = am.forward(x, Rng(100));
    CHECK(bitwise_equal(a, b));  // re-pinned stream
    // Fresh draws generally differ; with few heads a single pass can collide
    // by chance, so look across a handful of streams.
    bool any_diff = false;
    for (uint64_t k = 1; k <= 8; ++k) {
      any_diff |= !bitwise_equal(a, am.forward(x, Rng(100 + k)));
    }
    CHECK(any_diff);
  }
}

TEST_CASE("gradients flow through augmented forwards at pinned draws") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(37));
  Rng rng(39);
  std::vector<int64_t> label{2};
  for (auto spec : {AugmentationSpec::mhd(0.35), AugmentationSpec::ass(0.6, 0.25),
                    AugmentationSpec::mfm(0.5)}) {
    AugmentedModel am = build(model, spec);
    Rng pinned(77);
    Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.1, 0.9, true);
    backward(cross_entropy(am.forward(x, pinned), label));
    std::vector<double> an = to_vector(x.grad());
    auto fd = finite_difference_gradient(
        [&](const Tensor& t) {
          return cross_entropy(am.forward(t.detach(), pinned), label).item();
        },
        x.detach());
    CHECK(max_rel_error(an, fd) < 1e-4);
  }
}

TEST_CASE("base parameters stay untouched by augmented forwards") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(41));
  std::vector<Tensor> snapshot;
  for (const auto& [name, t] : model.params) snapshot.push_back(t.clone());
  Rng rng(43);
  Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  for (auto spec : {AugmentationSpec::mhd(0.9), AugmentationSpec::ass(0.3, 0.2),
                    AugmentationSpec::mfm(0.8)}) {
    AugmentedModel am = build(model, spec);
    for (int pass = 0; pass < 3; ++pass) am.forward(x, Rng(pass));
  }
  for (size_t i = 0; i < model.params.size(); ++i) {
    CHECK(bitwise_equal(model.params[i].second, snapshot[i]));
  }
}

TEST_CASE("build installs exactly the named strategy") {
  ViTConfig c = tiny_config();
  ViTModel model = init_params(c, Rng(47));
  AugmentedModel mhd = build(model, AugmentationSpec::mhd(0.5));
  InterceptorSet hooks = mhd.interceptors(Rng(1));
  CHECK(static_cast<bool>(hooks.attention_hook));
  CHECK_FALSE(static_cast<bool>(hooks.mlp_hook));
  AugmentedModel mfm = build(model, AugmentationSpec::mfm(0.5));
  hooks = mfm.interceptors(Rng(1));
  CHECK_FALSE(static_cast<bool>(hooks.attention_hook));
  CHECK(static_cast<bool>(hooks.mlp_hook));
}
