#include "lbgm/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace lbgm {

const Observation* OutcomeSeries::at_wave(int wave) const {
  for (const auto& obs : observations)
    if (obs.wave == wave) return &obs;
  return nullptr;
}

int OutcomeSeries::first_observed_wave() const {
  return observations.empty() ? 0 : observations.front().wave;
}

double OutcomeSeries::baseline_time() const {
  return observations.empty() ? 0.0 : observations.front().time;
}

const OutcomeSeries* Individual::series_for(const std::string& outcome_label) const {
  for (const auto& s : series)
    if (s.outcome_label == outcome_label) return &s;
  return nullptr;
}

int LongitudinalSample::outcome_index(const std::string& label) const {
  for (std::size_t k = 0; k < outcome_labels.size(); ++k)
    if (outcome_labels[k] == label) return static_cast<int>(k);
  return -1;
}

int LongitudinalSample::declared_waves(int outcome_idx) const {
  for (const auto& ind : individuals) {
    if (outcome_idx < static_cast<int>(ind.series.size()))
      return ind.series[outcome_idx].waves;
  }
  return 0;
}

std::vector<int> LongitudinalSample::observed_waves_anywhere(int outcome_idx) const {
  std::set<int> waves;
  for (const auto& ind : individuals) {
    if (outcome_idx >= static_cast<int>(ind.series.size())) continue;
    for (const auto& obs : ind.series[outcome_idx].observations) waves.insert(obs.wave);
  }
  return {waves.begin(), waves.end()};
}

std::map<int, double> LongitudinalSample::mean_wave_times(int outcome_idx) const {
  std::map<int, double> sum;
  std::map<int, int> count;
  for (const auto& ind : individuals) {
    if (outcome_idx >= static_cast<int>(ind.series.size())) continue;
    for (const auto& obs : ind.series[outcome_idx].observations) {
      sum[obs.wave] += obs.time;
      count[obs.wave] += 1;
    }
  }
  std::map<int, double> mean;
  for (const auto& [wave, s] : sum) mean[wave] = s / count[wave];
  return mean;
}

std::vector<Violation> validate(const LongitudinalSample& sample) {
  std::vector<Violation> out;
  auto add = [&out](std::string id, std::string outcome, int wave, std::string msg) {
    out.push_back({std::move(id), std::move(outcome), wave, std::move(msg)});
  };

  if (sample.outcome_labels.empty() || sample.outcome_labels.size() > 2)
    add("", "", 0, "sample must declare one or two outcomes");

  std::unordered_set<std::string> seen_ids;
  std::map<std::string, int> declared_j;
  for (const auto& ind : sample.individuals) {
    if (!seen_ids.insert(ind.id).second)
      add(ind.id, "", 0, "duplicate individual id");

    for (const auto& label : sample.outcome_labels) {
      const OutcomeSeries* s = ind.series_for(label);
      if (s == nullptr || s->observations.empty()) {
        add(ind.id, label, 0, "no observations for declared outcome");
        continue;
      }
      auto [it, inserted] = declared_j.try_emplace(label, s->waves);
      if (!inserted && it->second != s->waves)
        add(ind.id, label, 0, "declared wave count differs across individuals");
      if (s->waves < 3)
        add(ind.id, label, 0, "declared wave count below 3");

      for (std::size_t k = 0; k < s->observations.size(); ++k) {
        const Observation& obs = s->observations[k];
        if (obs.wave < 1 || obs.wave > s->waves)
          add(ind.id, label, obs.wave, "wave index outside 1..J");
        if (!std::isfinite(obs.time) || !std::isfinite(obs.value))
          add(ind.id, label, obs.wave, "non-finite time or value");
        if (k > 0) {
          const Observation& prev = s->observations[k - 1];
          if (obs.wave <= prev.wave)
            add(ind.id, label, obs.wave, "wave indices not strictly increasing");
          if (obs.time <= prev.time)
            add(ind.id, label, obs.wave, "times not strictly increasing");
        }
      }
    }
  }

  // Identification floor: at least 3 observed waves per outcome somewhere
  // in the sample (two loadings are fixed; anything less leaves no free
  // quantity to estimate).
  for (std::size_t k = 0; k < sample.outcome_labels.size(); ++k) {
    auto waves = sample.observed_waves_anywhere(static_cast<int>(k));
    if (!sample.individuals.empty() && waves.size() < 3)
      add("", sample.outcome_labels[k], 0,
          "outcome observed at fewer than 3 distinct waves in the sample");
  }
  return out;
}

std::string format_violations(const std::vector<Violation>& violations) {
  std::ostringstream os;
  for (const auto& v : violations) {
    os << "violation:";
    if (!v.individual_id.empty()) os << " id=" << v.individual_id;
    if (!v.outcome_label.empty()) os << " outcome=" << v.outcome_label;
    if (v.wave != 0) os << " wave=" << v.wave;
    os << ": " << v.message << "\n";
  }
  return os.str();
}

std::string CsvSchema::resolve(const std::string& canonical) const {
  auto it = columns.find(canonical);
  return it == columns.end() ? canonical : it->second;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(field);
  return fields;
}

std::string trimmed(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& raw, double& out) {
  const std::string s = trimmed(raw);
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

bool parse_int(const std::string& raw, int& out) {
  const std::string s = trimmed(raw);
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

LongitudinalSample load_long_csv(const std::string& path, const LoadOptions& options,
                                 LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty data file: " + path);

  const auto header = split_csv_line(line);
  auto column_of = [&header, &path](const std::string& name) {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (trimmed(header[k]) == name) return k;
    throw std::runtime_error("column '" + name + "' not found in " + path);
  };
  const std::size_t col_id = column_of(options.schema.resolve("id"));
  const std::size_t col_outcome = column_of(options.schema.resolve("outcome"));
  const std::size_t col_wave = column_of(options.schema.resolve("wave"));
  const std::size_t col_time = column_of(options.schema.resolve("time"));
  const std::size_t col_value = column_of(options.schema.resolve("value"));

  LongitudinalSample sample;
  std::unordered_map<std::string, std::size_t> individual_index;
  LoadReport rep;
  std::size_t line_no = 1;

  while (std::getline(in, line)) {
    ++line_no;
    if (trimmed(line).empty()) continue;
    ++rep.rows_read;
    const auto fields = split_csv_line(line);
    const std::size_t needed =
        std::max({col_id, col_outcome, col_wave, col_time, col_value});
    if (fields.size() <= needed)
      throw std::runtime_error("line " + std::to_string(line_no) + ": too few columns");

    const std::string id = trimmed(fields[col_id]);
    const std::string outcome = trimmed(fields[col_outcome]);
    if (id.empty() || outcome.empty())
      throw std::runtime_error("line " + std::to_string(line_no) + ": empty id or outcome");

    int wave = 0;
    if (!parse_int(fields[col_wave], wave) || wave < 1)
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": wave must be a positive integer");

    // Missing time or value drops the row; malformed text is an error.
    const std::string time_raw = trimmed(fields[col_time]);
    const std::string value_raw = trimmed(fields[col_value]);
    if (time_raw.empty() || value_raw.empty()) {
      ++rep.rows_dropped;
      continue;
    }
    double time = 0.0, value = 0.0;
    if (!parse_double(time_raw, time))
      throw std::runtime_error("line " + std::to_string(line_no) + ": non-numeric time");
    if (!parse_double(value_raw, value))
      throw std::runtime_error("line " + std::to_string(line_no) + ": non-numeric value");
    if (!std::isfinite(time) || !std::isfinite(value)) {
      ++rep.rows_dropped;
      continue;
    }
    bool sentinel = false;
    for (double d : options.drop_values)
      if (value == d) { sentinel = true; break; }
    if (sentinel) {
      ++rep.rows_dropped;
      continue;
    }

    if (sample.outcome_index(outcome) < 0) {
      if (sample.outcome_labels.size() == 2)
        throw std::runtime_error("more than two outcomes in " + path +
                                 " (first unexpected: '" + outcome + "')");
      sample.outcome_labels.push_back(outcome);
    }

    auto [it, inserted] = individual_index.try_emplace(id, sample.individuals.size());
    if (inserted) sample.individuals.push_back(Individual{id, {}});
    Individual& ind = sample.individuals[it->second];

    OutcomeSeries* series = nullptr;
    for (auto& s : ind.series)
      if (s.outcome_label == outcome) series = &s;
    if (series == nullptr) {
      ind.series.push_back(OutcomeSeries{outcome, 0, {}});
      series = &ind.series.back();
    }
    for (const auto& obs : series->observations)
      if (obs.wave == wave)
        throw std::runtime_error("duplicate (id, outcome, wave) at line " +
                                 std::to_string(line_no) + ": " + id + "," + outcome +
                                 "," + std::to_string(wave));
    series->observations.push_back({wave, time, value});
  }

  // Infer J per outcome, order each individual's series to match the
  // sample label order, and check time monotonicity in wave order.
  std::map<std::string, int> max_wave;
  for (const auto& ind : sample.individuals)
    for (const auto& s : ind.series)
      for (const auto& obs : s.observations)
        max_wave[s.outcome_label] = std::max(max_wave[s.outcome_label], obs.wave);

  for (auto& ind : sample.individuals) {
    std::vector<OutcomeSeries> ordered;
    for (const auto& label : sample.outcome_labels) {
      OutcomeSeries found{label, 0, {}};
      for (auto& s : ind.series)
        if (s.outcome_label == label) found = std::move(s);
      int j = max_wave[label];
      if (auto it = options.wave_count_override.find(label);
          it != options.wave_count_override.end())
        j = it->second;
      found.waves = j;
      std::sort(found.observations.begin(), found.observations.end(),
                [](const Observation& a, const Observation& b) { return a.wave < b.wave; });
      for (std::size_t k = 1; k < found.observations.size(); ++k)
        if (found.observations[k].time <= found.observations[k - 1].time)
          throw std::runtime_error("times not strictly increasing for id=" + ind.id +
                                   " outcome=" + label + " at wave " +
                                   std::to_string(found.observations[k].wave));
      ordered.push_back(std::move(found));
    }
    ind.series = std::move(ordered);
  }

  if (report != nullptr) *report = rep;
  return sample;
}

void write_long_csv(const LongitudinalSample& sample, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write data file: " + path);
  out << "id,outcome,wave,time,value\n";
  for (const auto& ind : sample.individuals)
    for (const auto& s : ind.series)
      for (const auto& obs : s.observations)
        out << ind.id << ',' << s.outcome_label << ',' << obs.wave << ','
            << format_double(obs.time) << ',' << format_double(obs.value) << '\n';
}

}  // namespace lbgm
