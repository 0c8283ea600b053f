#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gepd/tensor.hpp"

namespace gepd {

enum class Label { HC = 0, PD = 1 };
enum class Provenance { Real = 0, Generated = 1 };

std::string to_string(Label label);
std::string to_string(Provenance provenance);
Label parse_label(std::string_view text);
Provenance parse_provenance(std::string_view text);

// Raised for malformed or inconsistent input data. The message names the
// offending subject when there is one.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an optimiser produces a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ChannelLayout {
  std::vector<std::string> names;
  std::optional<std::string> reference;

  std::size_t size() const { return names.size(); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  // Throws DataError on duplicate names or a reference listed among names.
  void validate() const;

  bool operator==(const ChannelLayout&) const = default;
};

// One subject's continuous recording; samples are (channels, time) in microvolts.
struct Recording {
  std::string subject_id;
  Label label = Label::HC;
  double sampling_rate = 0.0;
  ChannelLayout layout;
  Tensor samples;

  std::size_t channels() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
  std::size_t length() const { return samples.rank() == 2 ? samples.dim(1) : 0; }
  void validate() const;
};

// A batch of equal-length epochs (count, channels, samples) with per-epoch
// label, provenance and originating subject.
struct EpochSet {
  Tensor epochs;
  std::vector<Label> labels;
  std::vector<Provenance> provenance;
  std::vector<std::string> subjects;
  ChannelLayout layout;
  double epoch_length_s = 0.0;
  double sampling_rate = 0.0;

  std::size_t count() const { return epochs.rank() == 3 ? epochs.dim(0) : 0; }
  std::size_t channels() const { return epochs.rank() == 3 ? epochs.dim(1) : layout.size(); }
  std::size_t samples() const;

  void validate() const;

  // Empty set that shares this set's layout and timing.
  EpochSet empty_like() const;
  EpochSet subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> indices_where(std::optional<Label> label,
                                         std::optional<Provenance> provenance) const;
  std::size_t count_where(std::optional<Label> label, std::optional<Provenance> provenance) const;
  std::vector<int> label_ints() const;
};

// Appends b to a; layouts and timing must agree.
EpochSet concat(const EpochSet& a, const EpochSet& b);

}  // namespace gepd
