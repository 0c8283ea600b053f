#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"

#include "gepd/augment.hpp"
#include "gepd/checkpoint.hpp"
#include "gepd/nn/optim.hpp"
#include "gepd/pruning.hpp"
#include "test_util.hpp"

using namespace gepd;
using namespace gepd::augment;

namespace {

// Two-cycle sinusoids with random phase plus small noise.
EpochSet toy_group(Label label, std::size_t n, std::size_t channels, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  EpochSet e;
  for (std::size_t c = 0; c < channels; ++c) e.layout.names.push_back("C" + std::to_string(c));
  e.sampling_rate = static_cast<double>(samples);
  e.epoch_length_s = 1.0;
  e.epochs = Tensor({n, channels, samples});
  for (std::size_t k = 0; k < n; ++k) {
    e.labels.push_back(label);
    e.provenance.push_back(Provenance::Real);
    e.subjects.push_back(to_string(label) + std::to_string(k % 5));
    const double ph = phase(rng);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t j = 0; j < samples; ++j) {
        e.epochs[(k * channels + c) * samples + j] =
            1.5 * std::sin(2.0 * std::numbers::pi * 2.0 * j / samples + ph + c) + 0.1 * noise(rng);
      }
    }
  }
  return e;
}

GanConfig small_config(std::size_t channels, std::size_t samples) {
  GanConfig c;
  c.channels = channels;
  c.samples = samples;
  c.noise_dim = 8;
  return c;
}

GanCheckpoint untrained(const GanConfig& cfg, Label group, const ChannelLayout& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Generator gen(cfg, rng);
  GanCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.group = group;
  ckpt.layout = layout;
  ckpt.sampling_rate = static_cast<double>(cfg.samples);
  ckpt.epoch_length_s = 1.0;
  ckpt.generator_state = checkpoint::snapshot(gen);
  return ckpt;
}

double amplitude_js(const EpochSet& a, const EpochSet& b) {
  const auto av = a.epochs.values(), bv = b.epochs.values();
  const auto p = pruning::histogram_probs(av, 32, -4.0, 4.0, 1e-10);
  const auto q = pruning::histogram_probs(bv, 32, -4.0, 4.0, 1e-10);
  return pruning::js(p, q);
}

// Penalty at `x` recomputed from scratch: input gradients, norms, mean.
double penalty_value(Critic& critic, const Tensor& x, double lambda) {
  const std::size_t b = x.dim(0), per = x.size() / b;
  critic.forward(x);
  const Tensor g = critic.backward(Tensor({b}, 1.0));
  std::vector<double> norms(b);
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < per; ++k) s += g[i * per + k] * g[i * per + k];
    norms[i] = std::sqrt(s);
  }
  return gradient_penalty(norms, lambda);
}

}  // namespace

TEST_CASE("generator output shape and range") {
  GanConfig cfg;
  std::mt19937_64 rng(1);
  Generator gen(cfg, rng);
  const Tensor z = gepd::testing::random_tensor({8, 128}, rng);
  const Tensor y = gen.forward(z);
  CHECK(y.shape() == Shape{8, 60, 2500});
  const auto [lo, hi] = std::minmax_element(y.values().begin(), y.values().end());
  CHECK(*lo >= -Generator::kOutputScale);
  CHECK(*hi <= Generator::kOutputScale);

  std::mt19937_64 rng2(1);
  Generator twin(cfg, rng2);
  CHECK(twin.forward(z) == y);

  for (std::size_t t : {8, 9, 31, 100}) {
    std::mt19937_64 r(2);
    Generator g(small_config(3, t), r);
    CHECK(g.forward(gepd::testing::random_tensor({2, 8}, r)).shape() == Shape{2, 3, t});
  }
  CHECK_THROWS_AS(small_config(3, 7).validate(), std::invalid_argument);
}

TEST_CASE("critic scores and gradients") {
  const GanConfig cfg = small_config(3, 24);
  std::mt19937_64 rng(3);
  Critic critic(cfg, rng);
  Tensor x = gepd::testing::random_tensor({4, 3, 24}, rng);
  std::copy(x.data(), x.data() + 72, x.data() + 72);
  const Tensor s = critic.forward(x);
  CHECK(s.shape() == Shape{4});
  CHECK(s[0] == s[1]);
  CHECK_THROWS_AS(critic.forward(Tensor({1, 2, 24})), std::invalid_argument);

  const Tensor xr = gepd::testing::random_tensor({3, 3, 24}, rng);
  const auto r = gepd::testing::grad_check(critic, xr, rng, 1e-6, 30, 1e-6);
  CHECK(r.input_rel_error < 1e-4);
  CHECK(r.param_rel_error < 1e-4);

  Generator gen(cfg, rng);
  const auto rg = gepd::testing::grad_check(gen, gepd::testing::random_tensor({2, 8}, rng), rng, 1e-6, 30, 1e-6);
  CHECK(rg.input_rel_error < 1e-4);
  CHECK(rg.param_rel_error < 1e-4);
}

TEST_CASE("loss arithmetic") {
  const std::vector<double> real{1.0, 3.0}, fake{2.0, 2.0};
  CHECK(critic_loss(real, fake) == 0.0);
  CHECK(generator_loss(fake) == -2.0);
  const std::vector<double> unit{1.0, 1.0, 1.0};
  CHECK(gradient_penalty(unit, 10.0) == 0.0);
  const std::vector<double> norms{0.0, 3.0};
  CHECK(gradient_penalty(norms, 10.0) == doctest::Approx(10.0 * (1.0 + 4.0) / 2.0));
}

TEST_CASE("gradient penalty parameter gradient matches finite differences") {
  const GanConfig cfg = small_config(2, 16);
  std::mt19937_64 rng(4);
  Critic critic(cfg, rng);
  const Tensor x = gepd::testing::random_tensor({3, 2, 16}, rng);
  const double lambda = 10.0;
  critic.zero_grad();
  const double p = accumulate_gradient_penalty(critic, x, lambda);
  const auto params = critic.parameters();
  std::vector<Tensor> analytic;
  for (auto* q : params) analytic.push_back(q->grad);
  CHECK(p == doctest::Approx(penalty_value(critic, x, lambda)));
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = params[k]->value;
    for (std::size_t i = 0; i < v.size(); i += std::max<std::size_t>(1, v.size() / 5)) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = penalty_value(critic, x, lambda);
      v[i] = orig - h;
      const double down = penalty_value(critic, x, lambda);
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(numeric - analytic[k][i]) / std::max(std::abs(numeric) + std::abs(analytic[k][i]), 1e-4));
      ++checked;
    }
  }
  CHECK(checked > 20);
  CHECK(worst < 1e-3);
}

TEST_CASE("weight clipping bounds critic parameters") {
  const EpochSet real = toy_group(Label::HC, 16, 2, 16, 5);
  GanConfig cfg = small_config(2, 16);
  cfg.epochs = 3;
  cfg.critic_lr = 1e-1;
  const auto ckpt = train_gan(real, cfg, 1);
  double worst = 0.0;
  for (const Tensor& t : ckpt.critic_state) {
    for (double v : t.values()) worst = std::max(worst, std::abs(v));
  }
  CHECK(worst <= cfg.clip);
  CHECK(worst > 0.0);
}

TEST_CASE("training reduces the divergence to real data") {
  const EpochSet real = toy_group(Label::HC, 64, 2, 32, 1);
  GanConfig cfg = small_config(2, 32);
  cfg.lipschitz = Lipschitz::GradientPenalty;
  cfg.critic_lr = 1e-3;
  cfg.epochs = 300;
  cfg.window = 10;
  cfg.early_stop = false;
  std::vector<double> w;
  const auto ckpt = train_gan(real, cfg, 7, [&](std::size_t, double, double wd, double) { w.push_back(wd); });
  REQUIRE(w.size() == 300);
  CHECK(ckpt.curves.wasserstein == w);
  // Without early stopping every epoch after convergence is a candidate.
  if (ckpt.converged_epoch) {
    CHECK(ckpt.selected_epoch >= *ckpt.converged_epoch);
    const auto& g = ckpt.curves.generator_loss;
    CHECK(ckpt.selection_generator_loss == *std::min_element(g.begin() + *ckpt.converged_epoch, g.end()));
  } else {
    CHECK(ckpt.selected_epoch >= 290);
  }
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += std::abs(w[i]) / 10.0;
    last += std::abs(w[290 + i]) / 10.0;
  }
  CHECK(last < first);

  GanConfig once = cfg;
  once.epochs = 1;
  const double before = amplitude_js(real, generate(train_gan(real, once, 7), 64, 1));
  CHECK(amplitude_js(real, generate(ckpt, 64, 1)) < 0.5 * before);

  GanConfig clip = small_config(2, 32);
  clip.epochs = 100;
  clip.early_stop = false;
  const auto clip_ckpt = train_gan(real, clip, 7);
  clip.epochs = 1;
  const double clip_before = amplitude_js(real, generate(train_gan(real, clip, 7), 64, 1));
  CHECK(amplitude_js(real, generate(clip_ckpt, 64, 1)) < 0.75 * clip_before);
}

TEST_CASE("early stopping ends one window after convergence") {
  const EpochSet real = toy_group(Label::PD, 16, 2, 16, 8);
  GanConfig cfg = small_config(2, 16);
  cfg.epochs = 500;
  cfg.window = 3;
  cfg.convergence_tol = 10.0;  // converges as soon as two windows exist
  const auto ckpt = train_gan(real, cfg, 2);
  REQUIRE(ckpt.converged_epoch.has_value());
  CHECK(*ckpt.converged_epoch == 5);
  CHECK(ckpt.curves.critic_loss.size() == 9);
  const auto& g = ckpt.curves.generator_loss;
  const double best = *std::min_element(g.begin() + 5, g.end());
  CHECK(ckpt.selection_generator_loss == best);
  CHECK(g[ckpt.selected_epoch] == best);
}

TEST_CASE("training is deterministic per seed and validates input") {
  const EpochSet real = toy_group(Label::HC, 12, 2, 16, 9);
  GanConfig cfg = small_config(2, 16);
  cfg.epochs = 4;
  const auto a = train_gan(real, cfg, 11);
  const auto b = train_gan(real, cfg, 11);
  const auto c = train_gan(real, cfg, 12);
  CHECK(a.curves.critic_loss == b.curves.critic_loss);
  CHECK(a.curves.generator_loss == b.curves.generator_loss);
  CHECK(a.generator_state == b.generator_state);
  CHECK(a.curves.critic_loss != c.curves.critic_loss);
  CHECK(generate(a, 5, 3).epochs == generate(b, 5, 3).epochs);
  CHECK(generate(a, 5, 3).epochs != generate(a, 5, 4).epochs);

  const EpochSet mixed = concat(real, toy_group(Label::PD, 4, 2, 16, 10));
  CHECK_THROWS_AS(train_gan(mixed, cfg, 1), DataError);
  CHECK_THROWS_AS(train_gan(real.empty_like(), cfg, 1), DataError);
  EpochSet fake = real;
  fake.provenance[0] = Provenance::Generated;
  CHECK_THROWS_AS(train_gan(fake, cfg, 1), DataError);

  GanConfig hot = cfg;
  hot.lipschitz = Lipschitz::GradientPenalty;
  hot.critic_lr = 1e300;
  hot.generator_lr = 1e300;
  CHECK_THROWS_AS(train_gan(real, hot, 1), DivergenceError);
}

TEST_CASE("generate labels and provenance") {
  const GanConfig cfg = small_config(2, 16);
  const auto ckpt = untrained(cfg, Label::PD, ChannelLayout{{"A", "B"}, std::nullopt}, 3);
  const EpochSet g = generate(ckpt, 11, 5);
  CHECK(g.count() == 11);
  CHECK(g.epochs.shape() == Shape{11, 2, 16});
  CHECK(g.count_where(Label::PD, Provenance::Generated) == 11);
  CHECK(g.subjects.front() == "generated-PD");
  CHECK(g.layout.names == std::vector<std::string>{"A", "B"});
}

TEST_CASE("fusion counts and real data preservation") {
  EpochSet real = concat(toy_group(Label::HC, 50, 2, 16, 1), toy_group(Label::PD, 50, 2, 16, 2));
  const GanConfig cfg = small_config(2, 16);
  const auto hc = untrained(cfg, Label::HC, real.layout, 1);
  const auto pd = untrained(cfg, Label::PD, real.layout, 2);

  const EpochSet fused = fuse(real, hc, pd, {1.7, 4});
  CHECK(fused.count() == 270);
  CHECK(fused.count_where(Label::HC, Provenance::Generated) == 85);
  CHECK(fused.count_where(Label::PD, Provenance::Generated) == 85);
  CHECK(fused.count_where(std::nullopt, Provenance::Real) == 100);
  CHECK(fused.epochs.slice_rows(0, 100) == real.epochs);
  CHECK(fused.labels == [&] {
    auto l = real.labels;
    l.insert(l.end(), 85, Label::HC);
    l.insert(l.end(), 85, Label::PD);
    return l;
  }());

  const EpochSet tiny = fuse(real, hc, pd, {1e-6, 4});
  CHECK(tiny.count() == 100);
  CHECK(tiny.epochs == real.epochs);

  CHECK(fuse(real, hc, pd, {0.5, 4}).epochs == fuse(real, hc, pd, {0.5, 4}).epochs);
  CHECK(generate_for(real, hc, pd, {0.5, 4}).count() == 50);
  CHECK_THROWS_AS(fuse(real, pd, hc, {1.0, 4}), DataError);
  CHECK_THROWS_AS(fuse(real, hc, pd, {0.0, 4}), std::invalid_argument);
  auto wrong = untrained(small_config(3, 16), Label::HC, ChannelLayout{{"A", "B", "C"}, std::nullopt}, 1);
  CHECK_THROWS_AS(fuse(real, wrong, pd, {1.0, 4}), DataError);
}

TEST_CASE("gan checkpoint round trip") {
  const EpochSet real = toy_group(Label::PD, 12, 2, 16, 3);
  GanConfig cfg = small_config(2, 16);
  cfg.epochs = 3;
  cfg.lipschitz = Lipschitz::GradientPenalty;
  const auto ckpt = train_gan(real, cfg, 5);
  const auto path = gepd::testing::temp_dir("gan_ckpt") / "pd.ckpt";
  save_checkpoint(path, ckpt);
  const auto back = load_checkpoint(path);
  CHECK(back.group == Label::PD);
  CHECK(back.config.lipschitz == Lipschitz::GradientPenalty);
  CHECK(back.layout == ckpt.layout);
  CHECK(back.curves.critic_loss == ckpt.curves.critic_loss);
  CHECK(back.selected_epoch == ckpt.selected_epoch);
  CHECK(back.converged_epoch == ckpt.converged_epoch);
  CHECK(back.generator_state == ckpt.generator_state);
  CHECK(back.critic_state == ckpt.critic_state);
  CHECK(generate(back, 6, 9).epochs == generate(ckpt, 6, 9).epochs);
  CHECK(gan_config_from_json(to_json(cfg)).window == cfg.window);
}
