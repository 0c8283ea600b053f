#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"

#include "gepd/dataio.hpp"
#include "test_util.hpp"

using namespace gepd;
using namespace gepd::dataio;
namespace fs = std::filesystem;

namespace {

// Amplitude of the f-Hz component over the central half of x, by direct DFT projection.
double tone_amplitude(const std::vector<double>& x, double f, double rate) {
  const std::size_t a = x.size() / 4, b = 3 * x.size() / 4;
  double re = 0.0, im = 0.0;
  for (std::size_t j = a; j < b; ++j) {
    const double ph = 2.0 * std::numbers::pi * f * static_cast<double>(j) / rate;
    re += x[j] * std::cos(ph);
    im += x[j] * std::sin(ph);
  }
  return 2.0 * std::hypot(re, im) / static_cast<double>(b - a);
}

std::vector<double> sine(std::size_t n, double f, double rate, double amp = 1.0) {
  std::vector<double> x(n);
  for (std::size_t j = 0; j < n; ++j) x[j] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(j) / rate);
  return x;
}

Recording make_recording(std::vector<std::string> names, std::size_t t, double rate, std::mt19937_64& rng,
                         std::string id = "R1") {
  Recording r;
  r.subject_id = std::move(id);
  r.sampling_rate = rate;
  r.layout.names = std::move(names);
  r.samples = Tensor({r.layout.size(), t});
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : r.samples.values()) v = n(rng);
  return r;
}

}  // namespace

TEST_CASE("bandpass passes in-band and rejects out-of-band tones") {
  const double rate = 500.0;
  const std::size_t n = 5000;
  PreprocessConfig cfg;
  const auto taps = design_bandpass(cfg.filter_taps, cfg.band_low_hz, cfg.band_high_hz, rate);
  const auto y10 = filter_zero_phase(sine(n, 10.0, rate), taps);
  CHECK(std::abs(tone_amplitude(y10, 10.0, rate) - 1.0) < 0.05);
  const auto y60 = filter_zero_phase(sine(n, 60.0, rate), taps);
  CHECK(20.0 * std::log10(tone_amplitude(y60, 60.0, rate)) <= -20.0);

  // Zero phase: the filtered in-band tone lines up with the input.
  const auto x = sine(n, 10.0, rate);
  double err = 0.0;
  for (std::size_t j = n / 4; j < 3 * n / 4; ++j) err = std::max(err, std::abs(y10[j] - x[j]));
  CHECK(err < 0.05);
}

TEST_CASE("bandpass is linear and maps zeros to zeros") {
  std::mt19937_64 rng(1);
  PreprocessConfig cfg;
  cfg.filter_taps = 101;
  auto r1 = make_recording({"A", "B"}, 600, 500.0, rng);
  auto r2 = make_recording({"A", "B"}, 600, 500.0, rng);
  Recording mix = r1;
  for (std::size_t i = 0; i < mix.samples.size(); ++i) mix.samples[i] = 2.5 * r1.samples[i] - 0.7 * r2.samples[i];
  const auto f1 = bandpass(r1, cfg), f2 = bandpass(r2, cfg), fm = bandpass(mix, cfg);
  CHECK(fm.samples.dim(1) == 600);
  double err = 0.0;
  for (std::size_t i = 0; i < fm.samples.size(); ++i) {
    err = std::max(err, std::abs(fm.samples[i] - (2.5 * f1.samples[i] - 0.7 * f2.samples[i])));
  }
  CHECK(err < 1e-6);

  Recording zero = r1;
  zero.samples.fill(0.0);
  const auto fz = bandpass(zero, cfg);
  for (double v : fz.samples.values()) CHECK(v == 0.0);
}

TEST_CASE("bandpass errors") {
  std::mt19937_64 rng(2);
  auto r = make_recording({"A"}, 500, 500.0, rng);
  PreprocessConfig cfg;
  CHECK_THROWS_AS(bandpass(r, cfg), DataError);
  cfg.filter_taps = 101;
  cfg.band_high_hz = 300.0;
  CHECK_THROWS_AS(bandpass(r, cfg), std::invalid_argument);
  cfg.band_high_hz = 45.0;
  cfg.filter_taps = 100;
  CHECK_THROWS_AS(bandpass(r, cfg), std::invalid_argument);
}

TEST_CASE("rereference matches loop subtraction") {
  std::mt19937_64 rng(3);
  const auto r = make_recording({"A", "B", "C"}, 50, 100.0, rng);
  const auto out = rereference(r, "B");
  CHECK(out.layout.names == std::vector<std::string>{"A", "C"});
  CHECK(out.layout.reference == std::optional<std::string>("B"));
  const std::size_t src_rows[] = {0, 2};
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t j = 0; j < 50; ++j) {
      CHECK(out.samples[k * 50 + j] == r.samples[src_rows[k] * 50 + j] - r.samples[1 * 50 + j]);
    }
  }

  Recording twin = r;
  std::copy_n(twin.samples.data(), 50, twin.samples.data() + 50);
  const auto self = rereference(twin, "B").samples.slice_rows(0, 1);
  for (double v : self.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(rereference(r, "Z"), DataError);
}

TEST_CASE("harmonize keeps the shared channels in order") {
  std::mt19937_64 rng(4);
  const std::vector<Recording> a{make_recording({"A", "B", "C"}, 10, 100.0, rng)};
  const std::vector<Recording> b{make_recording({"D", "C", "B"}, 10, 100.0, rng)};
  const auto h = harmonize(a, b);
  CHECK(h.shared.names == std::vector<std::string>{"B", "C"});
  CHECK(h.a[0].layout.names == h.shared.names);
  CHECK(h.b[0].layout.names == h.shared.names);
  CHECK(h.b[0].samples[0] == b[0].samples[2 * 10]);

  const std::vector<Recording> c{make_recording({"X"}, 10, 100.0, rng)};
  CHECK_THROWS_AS(harmonize(a, c), DataError);

  // 63 vs 64 names sharing 60.
  const auto names = default_channel_names(64);
  std::vector<std::string> ui(names.begin(), names.begin() + 60), unm(names.begin(), names.begin() + 60);
  ui.insert(ui.end(), {"U1", "U2", "U3"});
  unm.insert(unm.end(), {"N1", "N2", "N3", "N4"});
  const auto h2 = harmonize(std::vector<Recording>{make_recording(ui, 4, 100.0, rng)},
                            std::vector<Recording>{make_recording(unm, 4, 100.0, rng)});
  CHECK(h2.shared.size() == 60);
}

TEST_CASE("rereference and harmonize commute for a shared reference") {
  std::mt19937_64 rng(5);
  const std::vector<Recording> a{make_recording({"A", "R", "B", "C"}, 20, 100.0, rng)};
  const std::vector<Recording> b{make_recording({"C", "R", "B", "D"}, 20, 100.0, rng)};
  const auto h1 = harmonize(std::vector<Recording>{rereference(a[0], "R")},
                            std::vector<Recording>{rereference(b[0], "R")});
  const auto h0 = harmonize(a, b);
  const auto a2 = rereference(h0.a[0], "R");
  const auto b2 = rereference(h0.b[0], "R");
  CHECK(h1.a[0].layout.names == a2.layout.names);
  CHECK(h1.a[0].samples == a2.samples);
  CHECK(h1.b[0].samples == b2.samples);
}

TEST_CASE("epoch boundaries") {
  std::mt19937_64 rng(6);
  PreprocessConfig cfg;
  const auto r13 = make_recording({"A", "B"}, 6500, 500.0, rng);
  const auto e = epoch(r13, cfg);
  CHECK(e.count() == 2);
  CHECK(e.samples() == 2500);
  CHECK(e.epochs[(1 * 2 + 1) * 2500] == r13.samples[1 * 6500 + 2500]);
  e.validate();
  CHECK(epoch(make_recording({"A"}, 2500, 500.0, rng), cfg).count() == 1);
  CHECK_THROWS_AS(epoch(make_recording({"A"}, 2495, 500.0, rng), cfg), DataError);
}

TEST_CASE("zscore moments") {
  std::mt19937_64 rng(7);
  PreprocessConfig cfg;
  EpochSet e;
  e.layout.names = {"A", "B", "C"};
  e.sampling_rate = 10.0;
  e.epoch_length_s = 4.0;
  e.epochs = gepd::testing::random_tensor({5, 3, 40}, rng, 7.0);
  for (double& v : e.epochs.values()) v += 3.0;
  e.labels.assign(5, Label::HC);
  e.provenance.assign(5, Provenance::Real);
  e.subjects = {"a", "a", "b", "b", "b"};
  const auto z = zscore(e, cfg);
  for (std::size_t r = 0; r < 15; ++r) {
    double m = 0.0, s = 0.0;
    for (std::size_t j = 0; j < 40; ++j) m += z.epochs[r * 40 + j];
    m /= 40.0;
    for (std::size_t j = 0; j < 40; ++j) s += std::pow(z.epochs[r * 40 + j] - m, 2);
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(std::sqrt(s / 40.0) - 1.0) < 1e-4);
  }
  const auto zz = zscore(z, cfg);
  CHECK(max_abs_diff(zz.epochs, z.epochs) < 1e-6);

  EpochSet row;
  row.layout.names = {"A"};
  row.sampling_rate = 3.0;
  row.epoch_length_s = 1.0;
  row.epochs = Tensor({1, 1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  row.labels = {Label::PD};
  row.provenance = {Provenance::Real};
  row.subjects = {"s"};
  const auto zr = zscore(row, cfg);
  const double k = std::sqrt(1.5);
  CHECK(zr.epochs[0] == doctest::Approx(-k));
  CHECK(zr.epochs[1] == doctest::Approx(0.0));
  CHECK(zr.epochs[2] == doctest::Approx(k));

  std::vector<std::string> warnings;
  row.epochs.fill(4.0);
  const auto flat = zscore(row, cfg, &warnings);
  CHECK(warnings.size() == 1);
  for (double v : flat.epochs.values()) CHECK(v == 0.0);

  cfg.zscore_scope = ZScoreScope::PerRecordingChannel;
  const auto zrec = zscore(e, cfg);
  // Subject "a" owns epochs 0 and 1: channel 2 pooled over both has mean 0, sd 1.
  double m = 0.0, ss = 0.0;
  for (std::size_t k2 : {0, 1}) {
    for (std::size_t j = 0; j < 40; ++j) m += zrec.epochs[(k2 * 3 + 2) * 40 + j];
  }
  m /= 80.0;
  for (std::size_t k2 : {0, 1}) {
    for (std::size_t j = 0; j < 40; ++j) ss += std::pow(zrec.epochs[(k2 * 3 + 2) * 40 + j] - m, 2);
  }
  CHECK(std::abs(m) < 1e-9);
  CHECK(std::abs(std::sqrt(ss / 80.0) - 1.0) < 1e-9);
}

TEST_CASE("manifest round trip and loader errors") {
  const fs::path dir = gepd::testing::temp_dir("dataio_manifest");
  SynthSpec spec;
  spec.n_hc = 2;
  spec.n_pd = 2;
  spec.n_channels = 4;
  spec.duration_s = 3.0;
  const auto recs = synth_dataset(spec, 9);
  const auto manifest = write_dataset(dir / "f32", "toy", recs);
  LoadOptions keep;
  keep.target_rate_hz.reset();
  AccessLog log;
  keep.access_log = &log;
  const auto loaded = load_dataset(manifest, keep);
  REQUIRE(loaded.size() == 4);
  CHECK(log.events.size() == 5);
  CHECK(loaded[3].label == Label::PD);
  CHECK(loaded[2].subject_id == recs[2].subject_id);
  for (std::size_t i = 0; i < recs[1].samples.size(); ++i) {
    CHECK(loaded[1].samples[i] == static_cast<double>(static_cast<float>(recs[1].samples[i])));
  }

  const auto csv_manifest = write_dataset(dir / "csv", "toy", recs, true);
  const auto loaded_csv = load_dataset(csv_manifest, keep);
  CHECK(loaded_csv[0].samples == recs[0].samples);

  // Resampled to 500 Hz by default.
  const auto up = load_dataset(manifest);
  CHECK(up[0].sampling_rate == 500.0);
  CHECK(up[0].length() == 1500);

  // Drop one row from a subject's file.
  auto broken = recs[2];
  broken.samples = broken.samples.slice_rows(0, 3);
  write_signal_f32(dir / "f32" / (broken.subject_id + ".f32"), broken.samples, broken.sampling_rate);
  try {
    load_dataset(manifest, keep);
    FAIL("expected a channel mismatch");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(broken.subject_id) != std::string::npos);
  }

  fs::remove(dir / "csv" / (recs[0].subject_id + ".csv"));
  CHECK_THROWS_AS(load_dataset(csv_manifest, keep), DataError);

  {
    std::ofstream out(dir / "bad_label.ini");
    out << "[dataset]\nsampling_rate = 100\nchannels = A\n\n[subject.X1]\nlabel = MS\npath = x.f32\n";
  }
  try {
    load_dataset(dir / "bad_label.ini", keep);
    FAIL("expected a label error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("X1") != std::string::npos);
  }

  {
    std::ofstream out(dir / "empty.ini");
    out << "[dataset]\nname = none\nsampling_rate = 500\nchannels = A, B\n";
  }
  CHECK(load_dataset(dir / "empty.ini").empty());

  {
    std::ofstream out(dir / "nan.csv");
    out << "A\n1.0\nnan\n";
    std::ofstream m(dir / "nan.ini");
    m << "[dataset]\nsampling_rate = 100\nchannels = A\n\n[subject.N1]\nlabel = HC\npath = nan.csv\n";
  }
  CHECK_THROWS_AS(load_dataset(dir / "nan.ini", keep), DataError);
  CHECK_THROWS_AS(load_dataset(dir / "missing.ini"), DataError);
}

TEST_CASE("polyphase resampling keeps in-band tones") {
  const auto x = sine(2000, 5.0, 128.0);
  const auto y = resample_poly(x, 125, 32);
  CHECK(y.size() == 7813);
  CHECK(std::abs(tone_amplitude(y, 5.0, 500.0) - 1.0) < 0.02);
  const auto d = resample_poly(sine(5000, 3.0, 500.0), 32, 125);
  CHECK(std::abs(tone_amplitude(d, 3.0, 128.0) - 1.0) < 0.02);
  // Above the new Nyquist: suppressed.
  const auto alias = resample_poly(sine(5000, 100.0, 500.0), 32, 125);
  double peak = 0.0;
  for (std::size_t j = alias.size() / 4; j < 3 * alias.size() / 4; ++j) peak = std::max(peak, std::abs(alias[j]));
  CHECK(peak < 0.05);
}

TEST_CASE("synthetic datasets") {
  SynthSpec spec;
  spec.discriminative_channels = {1, 4};
  spec.duration_s = 10.0;
  const auto a = synth_dataset(spec, 42);
  const auto b = synth_dataset(spec, 42);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].samples == b[i].samples);
  CHECK(synth_dataset(spec, 43)[0].samples != a[0].samples);
  CHECK(a[0].label == Label::HC);
  CHECK(a[19].label == Label::PD);

  // Band power at the effect frequency separates groups only on planted channels.
  auto power = [&](const std::vector<Recording>& rs, std::size_t ch, Label l) {
    double total = 0.0;
    int count = 0;
    for (const auto& r : rs) {
      if (r.label != l) continue;
      const std::size_t t = r.length();
      const std::vector<double> row(r.samples.data() + ch * t, r.samples.data() + (ch + 1) * t);
      total += std::pow(tone_amplitude(row, spec.effect_freq_hz, spec.sampling_rate), 2);
      ++count;
    }
    return total / count;
  };
  CHECK(power(a, 1, Label::PD) > 4.0 * power(a, 1, Label::HC));
  CHECK(power(a, 4, Label::PD) > 4.0 * power(a, 4, Label::HC));
  CHECK(power(a, 0, Label::PD) < 2.0 * power(a, 0, Label::HC));

  SynthSpec null = spec;
  null.effect_uv = 0.0;
  const auto n = synth_dataset(null, 42);
  const double ratio = power(n, 1, Label::PD) / power(n, 1, Label::HC);
  CHECK(ratio > 0.5);
  CHECK(ratio < 2.0);

  spec.discriminative_channels = {25};
  CHECK_THROWS_AS(synth_dataset(spec, 1), std::invalid_argument);
}
