#include "lbgm/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lbgm {

namespace {

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string f;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(f);
      f.clear();
    } else if (c != '\r') {
      f.push_back(c);
    }
  }
  fields.push_back(f);
  return fields;
}

double field_or_nan(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  // from_chars handles subnormal p-values that stod would reject
  if (ptr != s.data() + s.size() ||
      (ec != std::errc() && ec != std::errc::result_out_of_range))
    throw std::runtime_error("malformed numeric field: '" + s + "'");
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  return in;
}

void derived_row(std::ostream& out, const std::string& panel, const std::string& quantity,
                 const DerivedValue* y, const DerivedValue* z, const DerivedValue* cross) {
  out << panel << ',' << quantity;
  for (const DerivedValue* v : {y, z, cross}) {
    if (v != nullptr && v->defined)
      out << ',' << num(v->estimate) << ',' << num(v->se) << ',' << num(v->pvalue);
    else
      out << ",,,";
  }
  out << '\n';
}

}  // namespace

void write_parameter_table(const std::string& path, const FitResult& fit, double level) {
  auto out = open_out(path);
  const auto cis = wald_ci(fit, level);
  out << "parameter,estimate,se,ci_low,ci_high,pvalue\n";
  for (int k = 0; k < fit.natural.size(); ++k)
    out << fit.index.names[k] << ',' << num(fit.natural[k]) << ',' << num(fit.se[k]) << ','
        << num(cis[k].first) << ',' << num(cis[k].second) << ','
        << num(wald_pvalue(fit.natural[k], fit.se[k])) << '\n';
}

void write_derived_report(const std::string& path, const DerivedReport& report) {
  auto out = open_out(path);
  out << "panel,quantity,y_estimate,y_se,y_pvalue,z_estimate,z_se,z_pvalue,"
         "cov_estimate,cov_se,cov_pvalue\n";
  const bool parallel = report.outcomes.size() == 2;

  std::size_t n_intervals = 0;
  for (const auto& o : report.outcomes)
    n_intervals = std::max(n_intervals, o.rate_mean.size());

  for (std::size_t k = 0; k < n_intervals; ++k) {
    const DerivedValue* y = k < report.outcomes[0].rate_mean.size()
                                ? &report.outcomes[0].rate_mean[k]
                                : nullptr;
    const DerivedValue* z = parallel && k < report.outcomes[1].rate_mean.size()
                                ? &report.outcomes[1].rate_mean[k]
                                : nullptr;
    derived_row(out, "mean", "rate_interval_" + std::to_string(k + 1), y, z, nullptr);
  }
  for (std::size_t u = 0; u < report.outcomes.size(); ++u) {
    const auto& ch = report.outcomes[u].change;
    for (std::size_t r = 0; r < ch.waves.size(); ++r)
      derived_row(out, "mean", "change_wave_" + std::to_string(ch.waves[r]),
                  u == 0 ? &ch.change[r] : nullptr, u == 1 ? &ch.change[r] : nullptr,
                  nullptr);
  }
  for (std::size_t k = 0; k < n_intervals; ++k) {
    const DerivedValue* y = k < report.outcomes[0].rate_var.size()
                                ? &report.outcomes[0].rate_var[k]
                                : nullptr;
    const DerivedValue* z = parallel && k < report.outcomes[1].rate_var.size()
                                ? &report.outcomes[1].rate_var[k]
                                : nullptr;
    const DerivedValue* c =
        parallel && k < report.rate_cov.size() ? &report.rate_cov[k] : nullptr;
    derived_row(out, "variance", "rate_interval_" + std::to_string(k + 1), y, z, c);
  }
  if (parallel) {
    derived_row(out, "variance", "initial_status_cov", nullptr, nullptr,
                &report.intercept_cov);
    derived_row(out, "correlation", "intercept", nullptr, nullptr, &report.intercept_corr);
    derived_row(out, "correlation", "rate", nullptr, nullptr, &report.rate_corr);
  }
}

void write_trajectory(const std::string& path, const LongitudinalSample& sample,
                      const FitResult& fit) {
  auto out = open_out(path);
  out << "series,id,outcome,wave,time,value\n";
  for (std::size_t u = 0; u < fit.spec.outcomes.size(); ++u) {
    const std::string& label = fit.spec.outcomes[u].label;
    const int idx = sample.outcome_index(label);
    const auto waves = sample.observed_waves_anywhere(idx);
    const auto mean_times = sample.mean_wave_times(idx);
    Eigen::VectorXd times(waves.size());
    for (std::size_t k = 0; k < waves.size(); ++k) times[k] = mean_times.at(waves[k]);
    const ChangeFromBaseline ch =
        change_from_baseline(fit, static_cast<int>(u), waves, times);
    for (std::size_t k = 0; k < waves.size(); ++k)
      out << "implied,," << label << ',' << waves[k] << ',' << num(times[k]) << ','
          << num(fit.estimates.outcomes[u].mu_eta0 + ch.change[k].estimate) << '\n';
  }
  for (const auto& ind : sample.individuals)
    for (const auto& s : ind.series)
      for (const auto& obs : s.observations)
        out << "observed," << ind.id << ',' << s.outcome_label << ',' << obs.wave << ','
            << num(obs.time) << ',' << num(obs.value) << '\n';
}

void write_metric_report(const std::string& path, const MetricReport& report) {
  auto out = open_out(path);
  out << "parameter,truth,relative_bias,empirical_se,relative_rmse,coverage\n";
  for (std::size_t k = 0; k < report.parameter_names.size(); ++k)
    out << report.parameter_names[k] << ',' << num(report.truth[k]) << ','
        << num(report.relative_bias[k]) << ',' << num(report.empirical_se[k]) << ','
        << num(report.relative_rmse[k]) << ',' << num(report.coverage[k]) << '\n';
}

void write_replication_estimates(const std::string& path, const StudyResult& result,
                                 const std::vector<std::string>& names) {
  auto out = open_out(path);
  out << "replication,converged,parameter,estimate,se,ci_low,ci_high\n";
  for (const auto& rec : result.replications) {
    if (!rec.converged) {
      out << rec.attempt << ",0,,,,,\n";
      continue;
    }
    for (std::size_t k = 0; k < names.size(); ++k)
      out << rec.attempt << ",1," << names[k] << ',' << num(rec.estimates[k]) << ','
          << num(rec.se[k]) << ',' << num(rec.ci_low[k]) << ',' << num(rec.ci_high[k])
          << '\n';
  }
}

std::vector<ParameterTableRow> read_parameter_table(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || split_line(line).size() != 6)
    throw std::runtime_error("unexpected parameter table header in " + path);
  std::vector<ParameterTableRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != 6) throw std::runtime_error("malformed parameter table row in " + path);
    rows.push_back({f[0], field_or_nan(f[1]), field_or_nan(f[2]), field_or_nan(f[3]),
                    field_or_nan(f[4]), field_or_nan(f[5])});
  }
  return rows;
}

std::vector<DerivedTableRow> read_derived_report(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || split_line(line).size() != 11)
    throw std::runtime_error("unexpected derived report header in " + path);
  std::vector<DerivedTableRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != 11) throw std::runtime_error("malformed derived report row in " + path);
    DerivedTableRow row;
    row.panel = f[0];
    row.quantity = f[1];
    for (int c = 0; c < 3; ++c) {
      if (!f[2 + 3 * c].empty()) row.est[c] = field_or_nan(f[2 + 3 * c]);
      if (!f[3 + 3 * c].empty()) row.se[c] = field_or_nan(f[3 + 3 * c]);
      if (!f[4 + 3 * c].empty()) row.pvalue[c] = field_or_nan(f[4 + 3 * c]);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string cell(std::optional<double> est, std::optional<double> se,
                 std::optional<double> pvalue) {
  if (!est.has_value()) return "---";
  char buf[64];
  if (se.has_value() && std::isfinite(*se)) {
    const bool starred = pvalue.has_value() && std::isfinite(*pvalue) && *pvalue < 0.05;
    std::snprintf(buf, sizeof(buf), "%.3f (%.3f)%s", *est, *se, starred ? "*" : "");
  } else {
    std::snprintf(buf, sizeof(buf), "%.3f (se n/a)", *est);
  }
  return buf;
}

std::string cell(double est, double se, double pvalue) {
  std::optional<double> e, s, p;
  if (std::isfinite(est)) e = est;
  if (std::isfinite(se)) s = se;
  if (std::isfinite(pvalue)) p = pvalue;
  return cell(e, s, p);
}

void print_row(std::ostream& os, const std::string& label, const std::string& c1,
               const std::string& c2, const std::string& c3) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %20s %20s %20s\n", label.c_str(), c1.c_str(),
                c2.c_str(), c3.c_str());
  os << buf;
}

}  // namespace

std::string render_text_report(const std::vector<ParameterTableRow>& parameters,
                               const std::vector<DerivedTableRow>& derived) {
  // Outcome labels in declaration order, recovered from parameter names.
  std::vector<std::string> labels;
  for (const auto& row : parameters) {
    const auto open = row.name.find('[');
    const auto close = row.name.find(']');
    if (open == std::string::npos || close == std::string::npos) continue;
    const std::string label = row.name.substr(open + 1, close - open - 1);
    if (label == "yz") continue;
    bool known = false;
    for (const auto& l : labels) known = known || l == label;
    if (!known) labels.push_back(label);
  }
  if (labels.empty()) return "no fitted parameters\n";
  const bool parallel = labels.size() == 2;

  auto find_param = [&parameters](const std::string& name) -> const ParameterTableRow* {
    for (const auto& row : parameters)
      if (row.name == name) return &row;
    return nullptr;
  };
  auto param_cell = [&](const std::string& base, const std::string& label) {
    const ParameterTableRow* row = find_param(base + "[" + label + "]");
    return row == nullptr ? std::string("---") : cell(row->estimate, row->se, row->pvalue);
  };

  std::ostringstream os;
  os << "Latent basis growth model estimates\n";
  os << "===================================\n\n";
  print_row(os, "Mean", labels[0], parallel ? labels[1] : "", parallel ? "covariance" : "");
  print_row(os, "----", "----", parallel ? "----" : "", parallel ? "----" : "");
  print_row(os, "initial status", param_cell("mu_eta0", labels[0]),
            parallel ? param_cell("mu_eta0", labels[1]) : "", "---");

  for (const auto& row : derived) {
    if (row.panel != "mean" || row.quantity.rfind("rate_interval_", 0) != 0) continue;
    print_row(os, row.quantity, cell(row.est[0], row.se[0], row.pvalue[0]),
              parallel ? cell(row.est[1], row.se[1], row.pvalue[1]) : "", "---");
  }
  os << '\n';
  print_row(os, "Variance", labels[0], parallel ? labels[1] : "",
            parallel ? "covariance" : "");
  print_row(os, "--------", "----", parallel ? "----" : "", parallel ? "----" : "");
  {
    const DerivedTableRow* icov = nullptr;
    for (const auto& row : derived)
      if (row.panel == "variance" && row.quantity == "initial_status_cov") icov = &row;
    print_row(os, "initial status", param_cell("psi00", labels[0]),
              parallel ? param_cell("psi00", labels[1]) : "",
              icov != nullptr ? cell(icov->est[2], icov->se[2], icov->pvalue[2]) : "---");
  }
  for (const auto& row : derived) {
    if (row.panel != "variance" || row.quantity.rfind("rate_interval_", 0) != 0) continue;
    print_row(os, row.quantity, cell(row.est[0], row.se[0], row.pvalue[0]),
              parallel ? cell(row.est[1], row.se[1], row.pvalue[1]) : "",
              parallel ? cell(row.est[2], row.se[2], row.pvalue[2]) : "");
  }
  if (parallel) {
    os << '\n';
    for (const auto& row : derived) {
      if (row.panel != "correlation") continue;
      print_row(os, "corr(" + row.quantity + ")", "", "",
                cell(row.est[2], row.se[2], row.pvalue[2]));
    }
  }
  return os.str();
}

}  // namespace lbgm
