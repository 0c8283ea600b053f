#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"

#include "gepd/augment.hpp"
#include "gepd/quality.hpp"
#include "test_util.hpp"

using namespace gepd;
using namespace gepd::quality;

namespace {

// Phase-shifted two-cycle sinusoids on every channel plus white noise.
EpochSet toy(std::size_t n, std::size_t channels, std::size_t samples, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  EpochSet e;
  for (std::size_t c = 0; c < channels; ++c) e.layout.names.push_back("C" + std::to_string(c));
  e.sampling_rate = static_cast<double>(samples);
  e.epoch_length_s = 1.0;
  e.epochs = Tensor({n, channels, samples});
  for (std::size_t k = 0; k < n; ++k) {
    e.labels.push_back(k % 2 ? Label::PD : Label::HC);
    e.provenance.push_back(Provenance::Real);
    e.subjects.push_back("S" + std::to_string(k % 4));
    const double ph = phase(rng);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t j = 0; j < samples; ++j) {
        e.epochs[(k * channels + c) * samples + j] =
            1.5 * std::sin(2.0 * std::numbers::pi * 2.0 * j / samples + ph + 0.5 * c) + noise * g(rng);
      }
    }
  }
  return e;
}

AutoencoderConfig small(std::size_t hidden, std::size_t epochs) {
  AutoencoderConfig c;
  c.hidden_size = hidden;
  c.epochs = epochs;
  return c;
}

}  // namespace

TEST_CASE("layout conversion") {
  std::mt19937_64 rng(1);
  const Tensor x = gepd::testing::random_tensor({2, 3, 5}, rng);
  const Tensor t = to_time_major(x);
  CHECK(t.shape() == Shape{2, 5, 3});
  CHECK(t[(1 * 5 + 4) * 3 + 2] == x[(1 * 3 + 2) * 5 + 4]);
  CHECK(to_channel_major(t) == x);
}

TEST_CASE("autoencoder shapes and determinism") {
  std::mt19937_64 rng(2);
  Autoencoder ae(38, AutoencoderConfig{}, rng);
  const Tensor x = gepd::testing::random_tensor({1, 2500, 38}, rng);
  const Tensor y = ae.forward(x);
  CHECK(y.shape() == Shape{1, 2500, 38});
  CHECK(ae.encode(x).shape() == Shape{1, 2500, 128});
  CHECK(ae.forward(x) == y);
  CHECK_THROWS_AS(ae.forward(Tensor({1, 10, 37})), std::invalid_argument);
  CHECK_THROWS_AS(Autoencoder(0, AutoencoderConfig{}, rng), std::invalid_argument);
}

TEST_CASE("autoencoder gradients") {
  std::mt19937_64 rng(3);
  Autoencoder ae(3, small(4, 1), rng);
  const Tensor x = gepd::testing::random_tensor({2, 6, 3}, rng);
  const auto r = gepd::testing::grad_check(ae, x, rng, 1e-6, 30, 1e-6);
  CHECK(r.input_rel_error < 1e-5);
  CHECK(r.param_rel_error < 1e-5);
}

TEST_CASE("training reduces reconstruction loss") {
  const EpochSet real = toy(32, 2, 32, 0.1, 1);
  const auto ckpt = train_autoencoder(real, small(16, 60), 3);
  REQUIRE(ckpt.loss_curve.size() == 60);
  CHECK(ckpt.loss_curve.back() < 0.1 * ckpt.loss_curve.front());
  const auto again = train_autoencoder(real, small(16, 60), 3);
  CHECK(again.loss_curve.back() == ckpt.loss_curve.back());
  CHECK(again.state == ckpt.state);

  const auto losses = reconstruction_losses(ckpt, real);
  CHECK(losses.size() == 32);
  CHECK(std::all_of(losses.begin(), losses.end(), [](double l) { return l >= 0.0; }));

  EpochSet zeros = real;
  zeros.epochs.fill(0.0);
  const auto z = train_autoencoder(zeros, small(4, 40), 3);
  CHECK(z.loss_curve.back() < 1e-4);

  EpochSet generated = real;
  generated.provenance[0] = Provenance::Generated;
  CHECK_THROWS_AS(train_autoencoder(generated, small(4, 1), 3), DataError);
  CHECK_THROWS_AS(train_autoencoder(real.empty_like(), small(4, 1), 3), DataError);
}

TEST_CASE("calibration and scores") {
  const Calibration c = calibrate({4.0, 1.0, 100.0, 3.0, 2.0});
  CHECK(c.median == 3.0);
  CHECK(c.lo == 1.0);
  CHECK(c.hi == 9.0);
  CHECK(c.score(1.0) == 1.0);
  CHECK(c.score(0.5) == 1.0);
  CHECK(c.score(5.0) == doctest::Approx(0.5));
  CHECK(c.score(100.0) == 0.0);
  CHECK(calibrate({1.0, 3.0}).median == 2.0);
  CHECK_THROWS_AS(calibrate({}), DataError);

  // Anti-monotone in the loss and bounded for arbitrary inputs.
  std::mt19937_64 rng(4);
  std::lognormal_distribution<double> ln(0.0, 1.0);
  std::vector<double> cal(50);
  for (double& v : cal) v = ln(rng);
  const Calibration rc = calibrate(cal);
  std::vector<double> losses(200);
  for (double& v : losses) v = 3.0 * ln(rng);
  std::sort(losses.begin(), losses.end());
  for (std::size_t i = 1; i < losses.size(); ++i) {
    CHECK(rc.score(losses[i]) <= rc.score(losses[i - 1]));
    CHECK(rc.score(losses[i]) >= 0.0);
    CHECK(rc.score(losses[i]) <= 1.0);
  }
  const Calibration flat = calibrate({0.0, 0.0});
  CHECK(flat.score(0.0) == 1.0);
  CHECK(flat.score(1e-9) == 0.0);
}

TEST_CASE("verdict thresholds") {
  CHECK(verdict_for(0.9) == Verdict::Good);
  CHECK(verdict_for(std::nextafter(0.65, 1.0)) == Verdict::Good);
  CHECK(verdict_for(0.65) == Verdict::Indeterminate);
  CHECK(verdict_for(0.5) == Verdict::Indeterminate);
  CHECK(verdict_for(std::nextafter(0.5, 0.0)) == Verdict::Poor);
  CHECK(parse_verdict(to_string(Verdict::Poor)) == Verdict::Poor);
}

TEST_CASE("report histogram and serialisation") {
  const Calibration c = calibrate({1.0, 2.0, 3.0});
  const QualityReport r = make_report({1.0, 2.0, 3.0, 9.0, 0.0}, c, 10);
  CHECK(r.scores.size() == 5);
  CHECK(r.histogram.size() == 10);
  std::size_t total = 0;
  for (auto h : r.histogram) total += h;
  CHECK(total == 5);
  CHECK(r.histogram.back() == 2);  // scores of exactly 1
  CHECK(r.histogram.front() == 1);
  double mean = 0.0;
  for (double s : r.scores) mean += s / 5.0;
  CHECK(r.mean_score == doctest::Approx(mean));
  CHECK(r.verdict == verdict_for(r.mean_score));

  const auto dir = gepd::testing::temp_dir("quality_report");
  write_report(dir / "quality.json", r);
  const QualityReport back = read_report(dir / "quality.json");
  CHECK(back.scores == r.scores);
  CHECK(back.losses == r.losses);
  CHECK(back.mean_score == r.mean_score);
  CHECK(back.histogram == r.histogram);
  CHECK(back.calibration.hi == r.calibration.hi);
  CHECK(back.verdict == r.verdict);

  write_histogram_svg(dir / "hist.svg", r);
  std::ifstream in(dir / "hist.svg");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string svg = ss.str();
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  std::size_t bars = 0;
  for (std::size_t p = svg.find("fill=\"#4c72b0\""); p != std::string::npos; p = svg.find("fill=\"#4c72b0\"", p + 1)) ++bars;
  CHECK(bars == 10);
  CHECK_THROWS_AS(make_report({}, c), DataError);
}

TEST_CASE("scoring separates real data from noise") {
  const EpochSet real = toy(32, 2, 32, 0.1, 1);
  const auto ckpt = train_autoencoder(real, small(16, 60), 3);
  const QualityReport self = score(ckpt, real, real);
  CHECK(self.mean_score >= 0.5);
  const QualityReport held = score(ckpt, toy(32, 2, 32, 0.1, 2), real);

  EpochSet noise = toy(32, 2, 32, 0.0, 5);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.5);
  for (double& v : noise.epochs.values()) v = g(rng);
  const QualityReport nr = score(ckpt, noise, real);
  CHECK(nr.mean_score < held.mean_score);
  CHECK(nr.verdict == Verdict::Poor);

  const auto path = gepd::testing::temp_dir("quality_ckpt") / "ae.ckpt";
  save_checkpoint(path, ckpt);
  const auto back = load_checkpoint(path);
  CHECK(back.state == ckpt.state);
  CHECK(back.loss_curve == ckpt.loss_curve);
  CHECK(reconstruction_losses(back, noise) == reconstruction_losses(ckpt, noise));

  CHECK_THROWS_AS(score(ckpt, real.empty_like(), real), DataError);
  CHECK_THROWS_AS(score(ckpt, toy(4, 3, 32, 0.1, 1), real), DataError);
}

TEST_CASE("trained generator output scores good and untrained output scores poor") {
  EpochSet real = toy(64, 8, 32, 0.3, 1);
  std::fill(real.labels.begin(), real.labels.end(), Label::HC);
  const auto ae = train_autoencoder(real, small(4, 60), 3);

  augment::GanConfig g;
  g.noise_dim = 8;
  g.lipschitz = augment::Lipschitz::GradientPenalty;
  g.critic_lr = 1e-3;
  g.epochs = 300;
  g.window = 10;
  g.early_stop = false;
  const auto trained = augment::train_gan(real, g, 7);
  g.epochs = 1;
  const auto untrained = augment::train_gan(real, g, 7);

  const QualityReport good = score(ae, augment::generate(trained, 64, 1), real);
  const QualityReport poor = score(ae, augment::generate(untrained, 64, 1), real);
  CHECK(good.mean_score > kGoodThreshold);
  CHECK(good.verdict == Verdict::Good);
  CHECK(poor.mean_score < kPoorThreshold);
  CHECK(poor.verdict == Verdict::Poor);
  // The bulk of good scores sits in the upper half.
  std::size_t upper = 0;
  for (std::size_t i = good.histogram.size() / 2; i < good.histogram.size(); ++i) upper += good.histogram[i];
  CHECK(upper * 4 > 3 * good.scores.size());
}
