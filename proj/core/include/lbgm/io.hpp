#ifndef LBGM_IO_HPP
#define LBGM_IO_HPP

#include <optional>
#include <string>
#include <vector>

#include "lbgm/derived.hpp"
#include "lbgm/estimator.hpp"
#include "lbgm/simstudy.hpp"

namespace lbgm {

/// `parameter,estimate,se,ci_low,ci_high,pvalue`; unavailable fields are
/// left empty. P-values are two-sided normal Wald tests.
void write_parameter_table(const std::string& path, const FitResult& fit, double level);

/// Derived quantities in the two-panel layout (means panel, then the
/// variance/covariance panel, then standardized correlations):
/// `panel,quantity,y_estimate,y_se,y_pvalue,z_estimate,z_se,z_pvalue,
///  cov_estimate,cov_se,cov_pvalue`.
void write_derived_report(const std::string& path, const DerivedReport& report);

/// Observed points and model-implied means on the reference grid:
/// `series,id,outcome,wave,time,value` with series in {observed,implied}.
void write_trajectory(const std::string& path, const LongitudinalSample& sample,
                      const FitResult& fit);

/// `parameter,truth,relative_bias,empirical_se,relative_rmse,coverage`.
/// For parameters with zero truth the bias/rmse columns hold absolute
/// values.
void write_metric_report(const std::string& path, const MetricReport& report);

/// `replication,converged,parameter,estimate,se,ci_low,ci_high`.
void write_replication_estimates(const std::string& path, const StudyResult& result,
                                 const std::vector<std::string>& names);

struct ParameterTableRow {
  std::string name;
  double estimate, se, ci_low, ci_high, pvalue;
};

struct DerivedTableRow {
  std::string panel, quantity;
  std::optional<double> est[3], se[3], pvalue[3];  // y, z, cross columns
};

std::vector<ParameterTableRow> read_parameter_table(const std::string& path);
std::vector<DerivedTableRow> read_derived_report(const std::string& path);

/// Human-readable summary in the two-panel layout with significance
/// stars at the 0.05 level.
std::string render_text_report(const std::vector<ParameterTableRow>& parameters,
                               const std::vector<DerivedTableRow>& derived);

}  // namespace lbgm

#endif
