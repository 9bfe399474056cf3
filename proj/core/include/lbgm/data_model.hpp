#ifndef LBGM_DATA_MODEL_HPP
#define LBGM_DATA_MODEL_HPP

#include <map>
#include <string>
#include <vector>

namespace lbgm {

/// One measurement of one outcome: study wave index (1-based), the
/// individual's own measurement time, and the observed value.
struct Observation {
  int wave = 0;
  double time = 0.0;
  double value = 0.0;
};

/// Repeated measurements of a single outcome for one individual.
/// Missing waves are simply absent from `observations`.
struct OutcomeSeries {
  std::string outcome_label;
  int waves = 0;  // declared number of study waves J
  std::vector<Observation> observations;  // ordered by wave

  const Observation* at_wave(int wave) const;
  int first_observed_wave() const;
  double baseline_time() const;  // time of the first observed wave
};

struct Individual {
  std::string id;
  std::vector<OutcomeSeries> series;  // one per declared outcome, sample order

  const OutcomeSeries* series_for(const std::string& outcome_label) const;
};

/// A longitudinal sample of one or two repeated outcomes with
/// individually-varying measurement occasions. Immutable by convention
/// once built; fit and simulation workers share samples freely.
struct LongitudinalSample {
  std::vector<std::string> outcome_labels;  // size 1 or 2
  std::vector<Individual> individuals;

  std::size_t n() const { return individuals.size(); }
  int outcome_index(const std::string& label) const;  // -1 if absent
  /// Declared wave count J for an outcome (taken from the series).
  int declared_waves(int outcome_idx) const;
  /// Waves observed by at least one individual, ascending.
  std::vector<int> observed_waves_anywhere(int outcome_idx) const;
  /// Mean observed time per wave (keys: waves observed anywhere).
  std::map<int, double> mean_wave_times(int outcome_idx) const;
};

/// One invariant violation found by validate(). wave == 0 means the
/// violation is not tied to a specific wave.
struct Violation {
  std::string individual_id;
  std::string outcome_label;
  int wave = 0;
  std::string message;
};

/// Checks every sample invariant and returns the violations found
/// (empty report means the sample is valid). Never throws.
std::vector<Violation> validate(const LongitudinalSample& sample);

std::string format_violations(const std::vector<Violation>& violations);

/// Maps the canonical column names (id, outcome, wave, time, value) to
/// the names actually used in a CSV header.
struct CsvSchema {
  std::map<std::string, std::string> columns;
  std::string resolve(const std::string& canonical) const;
};

struct LoadOptions {
  CsvSchema schema;
  /// Sentinel values treated as missing (e.g. -9, -8 in survey exports).
  std::vector<double> drop_values;
  /// Per-outcome override of the declared wave count J; by default J is
  /// the largest wave index seen for the outcome.
  std::map<std::string, int> wave_count_override;
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;  // missing value/time or sentinel-coded
};

/// Reads a long-format CSV (one row per id x outcome x wave). Rows with
/// an empty/NaN value or time, or a value on the drop list, are dropped
/// and counted. Throws std::runtime_error on unreadable files, malformed
/// numbers, duplicate (id, outcome, wave) rows, or times that are not
/// strictly increasing in wave order within (id, outcome).
LongitudinalSample load_long_csv(const std::string& path,
                                 const LoadOptions& options = {},
                                 LoadReport* report = nullptr);

/// Writes the canonical long CSV (`id,outcome,wave,time,value`). Numeric
/// fields are serialized with enough digits to round-trip exactly.
void write_long_csv(const LongitudinalSample& sample, const std::string& path);

}  // namespace lbgm

#endif
