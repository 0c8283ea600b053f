#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "doctest.h"
#include <fmt/format.h>

#include "gepd/dataio.hpp"
#include "gepd/pruning.hpp"
#include "test_util.hpp"

using namespace gepd;
using namespace gepd::pruning;

namespace {

double kl_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    s += static_cast<long double>(p[i]) * std::log(static_cast<long double>(p[i]) / q[i]) / std::log(2.0L);
  }
  return static_cast<double>(s);
}

std::vector<double> random_probs(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (double& v : p) s += (v = u(rng));
  for (double& v : p) v /= s;
  return p;
}

SimilarityTable random_table(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SimilarityTable t;
  for (std::size_t i = 0; i < n; ++i) t.rows.push_back({fmt::format("C{}", i), u(rng), u(rng), u(rng), u(rng)});
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("histogram smoothing") {
  const std::vector<double> same(100, 0.1);
  const auto p = histogram_probs(same, 4, 0.0, 1.0, 1e-6);
  const double e = 1e-6 / (1.0 + 4e-6);
  CHECK(p[0] == doctest::Approx(1.0 - 3.0 * e).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(e).epsilon(1e-12));
  double s = 0.0;
  for (double v : p) s += v;
  CHECK(std::abs(s - 1.0) < 1e-12);

  std::vector<double> uniform;
  for (int i = 0; i < 400; ++i) uniform.push_back((i + 0.5) / 400.0);
  for (double v : histogram_probs(uniform, 4, 0.0, 1.0, 1e-10)) CHECK(v == doctest::Approx(0.25));

  HistogramSpec bad;
  bad.bins = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("gaussian histogram matches analytic bin masses") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(100000);
  for (double& v : x) v = n(rng);
  const auto p = histogram_probs(x, 64, -4.0, 4.0, 1e-10);
  const auto cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  double tv = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    const double lo = -4.0 + 8.0 * i / 64.0, hi = lo + 8.0 / 64.0;
    // Edge bins also collect the clamped tails.
    const double mass = (i == 0 ? cdf(hi) : i == 63 ? 1.0 - cdf(lo) : cdf(hi) - cdf(lo));
    tv += std::abs(p[i] - mass);
  }
  CHECK(0.5 * tv < 0.02);
}

TEST_CASE("kl and js values") {
  const std::vector<double> a{1.0, 0.0}, b{0.5, 0.5};
  CHECK(kl(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(js(a, b) == doctest::Approx(0.5 * std::log2(4.0 / 3.0) + 0.5 * (0.5 * std::log2(2.0 / 3.0) + 0.5)).epsilon(1e-14));
  CHECK(js(a, b) == doctest::Approx(0.311278).epsilon(1e-6));
  CHECK(js(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 1.0);
  CHECK(kl(b, b) == 0.0);
  CHECK(js(b, b) == 0.0);
  CHECK_THROWS_AS(kl(a, std::vector<double>{1.0}), std::invalid_argument);
  CHECK_THROWS_AS(js(a, std::vector<double>{1.0}), std::invalid_argument);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_probs(16, rng), q = random_probs(16, rng);
    CHECK(std::abs(kl(p, q) - kl_oracle(p, q)) < 1e-12);
    CHECK(kl(p, q) > 0.0);
    std::vector<double> m(16);
    for (std::size_t i = 0; i < 16; ++i) m[i] = 0.5 * (p[i] + q[i]);
    CHECK(std::abs(js(p, q) - 0.5 * (kl_oracle(p, m) + kl_oracle(q, m))) < 1e-12);
    CHECK(js(p, q) == js(q, p));
    CHECK(js(p, q) >= 0.0);
    CHECK(js(p, q) <= 1.0);
  }
}

TEST_CASE("similarity table on copied and planted data") {
  dataio::SynthSpec spec;
  spec.n_hc = 6;
  spec.n_pd = 6;
  spec.n_channels = 8;
  spec.duration_s = 8.0;
  spec.discriminative_channels = {5};
  dataio::PreprocessConfig cfg;
  cfg.filter_taps = 129;
  cfg.epoch_length_s = 2.0;
  const auto recs = dataio::synth_dataset(spec, 3);
  const EpochSet real = dataio::preprocess(recs, cfg);
  EpochSet fake = real;
  fake.provenance.assign(fake.count(), Provenance::Generated);
  const auto table = similarity_table(concat(real, fake));
  REQUIRE(table.rows.size() == 8);
  std::size_t best = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(table.rows[i].js_hc_real_fake == 0.0);
    CHECK(table.rows[i].js_pd_real_fake == 0.0);
    CHECK(table.rows[i].js_real_hc_pd == table.rows[i].js_fake_hc_pd);
    if (table.rows[i].js_real_hc_pd > table.rows[best].js_real_hc_pd) best = i;
  }
  CHECK(best == 5);

  CHECK_THROWS_AS(similarity_table(real), DataError);
}

TEST_CASE("prune rules") {
  SimilarityTable t;
  t.rows = {{"A", 0.05, 0.05, 0.9, 0.9}, {"B", 0.5, 0.5, 0.2, 0.2}, {"C", 0.4, 0.4, 0.3, 0.3}};
  const auto mask = prune(t, {});
  CHECK(mask.retained == std::vector<std::string>{"A"});
  CHECK(mask.trace.size() == 3);
  CHECK(mask.trace[1].hc_real_fake_ok == false);

  SimilarityTable ties;
  ties.rows = {{"A", 0.3, 0.3, 0.3, 0.3}, {"B", 0.3, 0.3, 0.3, 0.3}};
  CHECK(prune(ties, {}).retained.size() == 2);

  PruneConfig strict;
  strict.alpha = 2.0;
  CHECK_THROWS_AS(prune(t, strict), DataError);
  PruneConfig zero;
  zero.alpha = 0.0;
  CHECK_THROWS_AS(prune(t, zero), std::invalid_argument);

  PruneConfig sum;
  sum.threshold_base = ThresholdBase::Sum;
  sum.alpha = 0.1;
  sum.beta = 1.0;
  const auto th = compute_thresholds(t, sum);
  CHECK(th.alpha_real == doctest::Approx(0.1 * 1.4));
  CHECK(th.beta_hc == doctest::Approx(0.95));

  PruneConfig uni;
  uni.combine = Combine::Union;
  CHECK(prune(t, uni).retained.size() >= mask.retained.size());
}

TEST_CASE("prune guarantees and monotonicity on random tables") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_table(3 + trial % 40, rng);
    ChannelMask mask;
    try {
      mask = prune(t, {});
    } catch (const DataError&) {
      continue;
    }
    const auto before = t.means();
    const auto after = t.means(mask.retained);
    CHECK(after.real_hc_pd >= before.real_hc_pd);
    CHECK(after.fake_hc_pd >= before.fake_hc_pd);
    CHECK(after.hc_real_fake <= before.hc_real_fake);
    CHECK(after.pd_real_fake <= before.pd_real_fake);

    std::size_t previous = mask.retained.size();
    for (double alpha : {0.6, 0.8, 1.0}) {
      PruneConfig c;
      c.alpha = alpha;
      std::size_t kept = 0;
      try {
        kept = prune(t, c).retained.size();
      } catch (const DataError&) {
      }
      CHECK(kept <= previous);
      previous = kept;
    }
  }
}

TEST_CASE("apply_mask") {
  std::mt19937_64 rng(8);
  EpochSet e;
  e.layout.names = {"A", "B", "C"};
  e.sampling_rate = 5.0;
  e.epoch_length_s = 2.0;
  e.epochs = gepd::testing::random_tensor({4, 3, 10}, rng);
  e.labels = {Label::HC, Label::PD, Label::HC, Label::PD};
  e.provenance.assign(4, Provenance::Real);
  e.subjects = {"a", "b", "c", "d"};
  const auto full = apply_mask(e, full_mask(e.layout));
  CHECK(full.epochs == e.epochs);
  CHECK(full.layout == e.layout);

  ChannelMask m;
  m.retained = {"C", "A"};
  const auto sub = apply_mask(e, m);
  CHECK(sub.epochs.shape() == Shape{4, 2, 10});
  CHECK(sub.epochs[(2 * 2 + 0) * 10 + 3] == e.epochs[(2 * 3 + 2) * 10 + 3]);
  CHECK(sub.labels == e.labels);
  CHECK(apply_mask(sub, m).epochs == sub.epochs);

  ChannelMask one;
  one.retained = {"B"};
  CHECK(apply_mask(e, one).channels() == 1);
  ChannelMask bad;
  bad.retained = {"Z"};
  CHECK_THROWS_AS(apply_mask(e, bad), DataError);

  EpochSet big;
  big.layout.names = dataio::default_channel_names(60);
  big.sampling_rate = 500.0;
  big.epoch_length_s = 5.0;
  big.epochs = Tensor({2, 60, 2500});
  big.labels.assign(2, Label::HC);
  big.provenance.assign(2, Provenance::Real);
  big.subjects.assign(2, "x");
  ChannelMask m38;
  m38.retained.assign(big.layout.names.begin(), big.layout.names.begin() + 38);
  CHECK(apply_mask(big, m38).epochs.shape() == Shape{2, 38, 2500});
}

TEST_CASE("export similarity round trip") {
  std::mt19937_64 rng(12);
  const auto t = random_table(60, rng);
  const auto dir = gepd::testing::temp_dir("pruning_export");
  const auto mask = prune(t, {});
  const auto files = export_similarity(t, mask, dir);
  const auto back = read_similarity_csv(files.csv);
  REQUIRE(back.table.rows.size() == 60);
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(back.table.rows[i].channel == t.rows[i].channel);
    CHECK(back.table.rows[i].js_hc_real_fake == t.rows[i].js_hc_real_fake);
    CHECK(back.table.rows[i].js_pd_real_fake == t.rows[i].js_pd_real_fake);
    CHECK(back.table.rows[i].js_real_hc_pd == t.rows[i].js_real_hc_pd);
    CHECK(back.table.rows[i].js_fake_hc_pd == t.rows[i].js_fake_hc_pd);
  }
  CHECK(back.retained == mask.retained);
  {
    std::ifstream in(files.csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "channel,js_hc_real_fake,js_pd_real_fake,js_real_hc_pd,js_fake_hc_pd,retained");
  }
  CHECK(slurp(files.heatmap_before).substr(1, 3) == "PNG");
  CHECK(slurp(files.heatmap_before) != slurp(files.heatmap_after));

  const auto same = export_similarity(t, full_mask({[&] {
                                        std::vector<std::string> names;
                                        for (const auto& r : t.rows) names.push_back(r.channel);
                                        return names;
                                      }()}),
                                      dir / "full");
  CHECK(slurp(same.heatmap_before) == slurp(same.heatmap_after));

  CHECK_THROWS(export_similarity(t, mask, "/proc/forbidden/x"));
}
