#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gepd/types.hpp"

namespace gepd::dataio {

enum class ZScoreScope { PerEpochChannel, PerRecordingChannel };

std::string to_string(ZScoreScope scope);
ZScoreScope parse_zscore_scope(std::string_view text);

struct PreprocessConfig {
  double band_low_hz = 1.0;
  double band_high_hz = 45.0;
  std::size_t filter_taps = 825;
  double epoch_length_s = 5.0;
  // Empty: keep the recorded reference.
  std::string reference_channel;
  ZScoreScope zscore_scope = ZScoreScope::PerEpochChannel;
  double target_rate_hz = 500.0;
  // Optional explicit channel selection applied after re-referencing.
  std::vector<std::string> channels;

  // Throws std::invalid_argument unless 0 < low < high < rate / 2 and the tap
  // count is a positive odd integer.
  void validate(double sampling_rate) const;
};

// Ordered record of data-source reads, used to audit which inputs a pipeline
// touched and when.
struct AccessLog {
  std::vector<std::string> events;
  void record(std::string event) { events.push_back(std::move(event)); }
};

// ---------------------------------------------------------------------------
// Dataset directory format
//
// A manifest is an INI file:
//
//   [dataset]
//   name = UI
//   sampling_rate = 500
//   channels = Fp1, Fp2, F3, ...
//   reference = CPz            ; optional, the recording reference
//
//   [subject.S01]
//   label = PD
//   path = S01.f32             ; relative to the manifest directory
//
// Signal files ending in .csv hold one column per channel and one row per
// sample, with an optional header row of channel names. Any other extension
// is read as the raw float format below.
// ---------------------------------------------------------------------------

struct SubjectEntry {
  std::string subject_id;
  Label label = Label::HC;
  std::string path;
};

struct Manifest {
  std::string name;
  double sampling_rate = 0.0;
  ChannelLayout layout;
  std::vector<SubjectEntry> subjects;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Raw float signal file: 32-byte little-endian header followed by
// channels x samples float32 values in channel-major order.
//
//   offset  size  field
//   0       8     magic "GEPDSIG1"
//   8       4     uint32 channel count
//   12      4     uint32 reserved, 0
//   16      8     uint64 samples per channel
//   24      8     float64 sampling rate (Hz)
inline constexpr char kSignalMagic[8] = {'G', 'E', 'P', 'D', 'S', 'I', 'G', '1'};

struct RawSignal {
  double sampling_rate = 0.0;
  Tensor samples;  // (channels, time)
};

void write_signal_f32(const std::filesystem::path& path, const Tensor& samples, double sampling_rate);
RawSignal read_signal_f32(const std::filesystem::path& path);
void write_signal_csv(const std::filesystem::path& path, const Tensor& samples,
                      std::span<const std::string> channel_names);
// Columns are reordered to `expected` when the file carries a header row.
Tensor read_signal_csv(const std::filesystem::path& path, std::span<const std::string> expected);

struct LoadOptions {
  // Recordings at other rates are resampled to this rate; unset keeps the
  // manifest rate.
  std::optional<double> target_rate_hz = 500.0;
  AccessLog* access_log = nullptr;
};

// One Recording per manifest subject entry. Throws DataError naming the
// subject on missing files, channel-count mismatches, unknown labels or
// non-finite samples.
std::vector<Recording> load_dataset(const std::filesystem::path& manifest_path,
                                    const LoadOptions& options = {});

// Writes recordings plus a manifest into `dir`; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& name,
                                    std::span<const Recording> recordings, bool csv = false);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Subtracts the reference row from every row and drops it from the layout.
Recording rereference(const Recording& r, const std::string& reference);

// Keeps the named channels in the given order. Throws DataError naming the
// subject if any is missing.
Recording select_channels(const Recording& r, std::span<const std::string> names);

struct Harmonized {
  std::vector<Recording> a;
  std::vector<Recording> b;
  ChannelLayout shared;
};

// Restricts both datasets to the channels they share, ordered as in `a`.
Harmonized harmonize(std::span<const Recording> a, std::span<const Recording> b);

// Windowed-sinc FIR design with a Hamming window. Band-pass taps are scaled
// to unit gain at the passband centre.
std::vector<double> hamming_window(std::size_t taps);
std::vector<double> design_lowpass(std::size_t taps, double cutoff_hz, double sampling_rate);
std::vector<double> design_bandpass(std::size_t taps, double low_hz, double high_hz, double sampling_rate);

// Zero-phase application of a linear-phase (odd length) FIR filter: the
// output is aligned with the input and has the same length. Edges are
// extended by reflection.
std::vector<double> filter_zero_phase(std::span<const double> signal, std::span<const double> taps);

Recording bandpass(const Recording& r, const PreprocessConfig& cfg);

// Rational-rate polyphase resampling by up / down with an anti-aliasing
// Hamming-windowed low-pass.
std::vector<double> resample_poly(std::span<const double> signal, std::size_t up, std::size_t down);
Recording resample(const Recording& r, double target_rate_hz);

// Contiguous, non-overlapping epochs; the tail shorter than one epoch is dropped.
EpochSet epoch(const Recording& r, const PreprocessConfig& cfg);

// Standardises rows. Constant rows become zeros and add a warning.
EpochSet zscore(const EpochSet& e, const PreprocessConfig& cfg,
                std::vector<std::string>* warnings = nullptr);

// rereference (if configured) -> select_channels (if configured) -> bandpass
// -> epoch -> zscore, concatenated over recordings.
EpochSet preprocess(std::span<const Recording> recordings, const PreprocessConfig& cfg,
                    std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Synthetic populations
// ---------------------------------------------------------------------------

struct SiteShift {
  double gain = 1.0;
  double dc_offset_uv = 0.0;
  double alpha_shift_hz = 0.0;
  double extra_noise_uv = 0.0;
  double line_noise_uv = 0.0;
  double line_freq_hz = 50.0;
};

// Subjects share an AR(1) background plus an alpha rhythm; PD subjects carry
// an additional oscillation on the discriminative channels.
struct SynthSpec {
  std::size_t n_hc = 10;
  std::size_t n_pd = 10;
  std::size_t n_channels = 20;
  std::vector<std::string> channel_names;  // empty: generated names
  double duration_s = 20.0;
  double sampling_rate = 128.0;
  std::vector<std::size_t> discriminative_channels;
  double effect_uv = 20.0;
  double effect_freq_hz = 6.0;
  double background_uv = 10.0;
  double ar_coefficient = 0.9;
  double alpha_uv = 8.0;
  double alpha_freq_hz = 10.0;
  double subject_jitter = 0.2;
  std::string subject_prefix = "S";
  SiteShift site;

  void validate() const;
};

std::vector<Recording> synth_dataset(const SynthSpec& spec, std::uint64_t seed);

// Default electrode names for synthetic data (10-20 labels, then numbered).
std::vector<std::string> default_channel_names(std::size_t n);

}  // namespace gepd::dataio
