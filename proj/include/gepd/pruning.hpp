#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gepd/types.hpp"

namespace gepd::pruning {

struct HistogramSpec {
  std::size_t bins = 64;
  // Unset: pooled min/max of the channel over every compared epoch.
  std::optional<std::pair<double, double>> fixed_range;
  double epsilon = 1e-10;

  void validate() const;
};

struct ChannelDistribution {
  std::string channel;
  std::vector<double> probs;
};

struct GroupFilter {
  std::optional<Label> label;
  std::optional<Provenance> provenance;
};

// Normalised, epsilon-smoothed histogram: (count / n + eps) / (1 + bins * eps).
// Samples outside [lo, hi] fall into the edge bins.
std::vector<double> histogram_probs(std::span<const double> samples, std::size_t bins, double lo, double hi,
                                    double epsilon);

// Min and max of one channel over every epoch in the set.
std::pair<double, double> channel_range(const EpochSet& epochs, std::size_t channel);

// Histogram of one channel pooled over the epochs matching `filter`, on the
// given bin range. Throws DataError when no epoch matches.
ChannelDistribution estimate_distribution(const EpochSet& epochs, const GroupFilter& filter, std::size_t channel,
                                          const HistogramSpec& spec, std::pair<double, double> range);
// As above with the range taken from the spec or, failing that, from all epochs.
ChannelDistribution estimate_distribution(const EpochSet& epochs, const GroupFilter& filter, std::size_t channel,
                                          const HistogramSpec& spec);

// Base-2 divergences. kl skips terms with p == 0. Both throw
// std::invalid_argument on length mismatch.
double kl(std::span<const double> p, std::span<const double> q);
double js(std::span<const double> p, std::span<const double> q);
double kl(const ChannelDistribution& p, const ChannelDistribution& q);
double js(const ChannelDistribution& p, const ChannelDistribution& q);

struct SimilarityRow {
  std::string channel;
  double js_hc_real_fake = 0.0;  // real HC vs generated HC
  double js_pd_real_fake = 0.0;  // real PD vs generated PD
  double js_real_hc_pd = 0.0;    // real HC vs real PD
  double js_fake_hc_pd = 0.0;    // generated HC vs generated PD
};

struct ColumnMeans {
  double hc_real_fake = 0.0;
  double pd_real_fake = 0.0;
  double real_hc_pd = 0.0;
  double fake_hc_pd = 0.0;
};

struct SimilarityTable {
  std::vector<SimilarityRow> rows;

  ColumnMeans means() const;
  // Means over the named subset of channels.
  ColumnMeans means(std::span<const std::string> channels) const;
};

// One row per layout channel. Each channel's bin edges are shared by all four
// groups. Throws DataError if any label x provenance group is empty.
SimilarityTable similarity_table(const EpochSet& fusion, const HistogramSpec& spec = {});

enum class ThresholdBase { PerGroupMean, Sum };
enum class Combine { Intersection, Union };
// PerColumn compares each real/fake column with its own mean; Joint uses the
// mean over both real/fake columns for both.
enum class BetaScope { PerColumn, Joint };

std::string to_string(ThresholdBase v);
std::string to_string(Combine v);
std::string to_string(BetaScope v);
ThresholdBase parse_threshold_base(std::string_view text);
Combine parse_combine(std::string_view text);
BetaScope parse_beta_scope(std::string_view text);

struct PruneConfig {
  double alpha = 0.5;
  double beta = 0.5;
  ThresholdBase threshold_base = ThresholdBase::PerGroupMean;
  Combine combine = Combine::Intersection;
  BetaScope beta_scope = BetaScope::PerColumn;

  void validate() const;
};

struct Thresholds {
  double alpha_real = 0.0;  // applied to js_real_hc_pd
  double alpha_fake = 0.0;  // applied to js_fake_hc_pd
  double beta_hc = 0.0;     // applied to js_hc_real_fake
  double beta_pd = 0.0;     // applied to js_pd_real_fake
};

struct ChannelTrace {
  std::string channel;
  bool hc_real_fake_ok = false;
  bool pd_real_fake_ok = false;
  bool real_hc_pd_ok = false;
  bool fake_hc_pd_ok = false;
  bool retained = false;
};

struct ChannelMask {
  std::vector<std::string> retained;
  std::vector<ChannelTrace> trace;
  Thresholds thresholds;
};

Thresholds compute_thresholds(const SimilarityTable& table, const PruneConfig& cfg);

// Keeps channels whose real/fake divergences are at most the beta thresholds
// and whose HC/PD divergences are at least the alpha thresholds. Values within
// 1e-12 of a threshold count as passing. Throws DataError if nothing is kept.
ChannelMask prune(const SimilarityTable& table, const PruneConfig& cfg);

// Mask retaining every channel of the layout.
ChannelMask full_mask(const ChannelLayout& layout);

// Restricts the channel axis to the mask's channels in mask order.
EpochSet apply_mask(const EpochSet& e, const ChannelMask& mask);

struct ExportedFiles {
  std::filesystem::path csv;
  std::filesystem::path heatmap_before;
  std::filesystem::path heatmap_after;
};

// Writes similarity.csv and, when `images` is set, heatmap_before.png and
// heatmap_after.png (pruned channels greyed out).
ExportedFiles export_similarity(const SimilarityTable& table, const ChannelMask& mask,
                                const std::filesystem::path& out_dir, bool images = true);

struct ImportedSimilarity {
  SimilarityTable table;
  std::vector<std::string> retained;
};

ImportedSimilarity read_similarity_csv(const std::filesystem::path& path);
void write_similarity_csv(const std::filesystem::path& path, const SimilarityTable& table,
                          const ChannelMask& mask);

// RGB raster of the four columns, one panel per column, channels in a grid in
// table order. Exposed for tests.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> rgb;
};

Image render_heatmap(const SimilarityTable& table, const std::vector<bool>& retained);
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace gepd::pruning
