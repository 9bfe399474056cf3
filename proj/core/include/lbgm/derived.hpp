#ifndef LBGM_DERIVED_HPP
#define LBGM_DERIVED_HPP

#include <string>
#include <vector>

#include "lbgm/estimator.hpp"

namespace lbgm {

/// A derived point estimate with first-order delta-method uncertainty.
/// se and pvalue are NaN when the parameter covariance is unavailable;
/// defined is false when the quantity does not exist for the model (for
/// example a rate in an interval the outcome never spans).
struct DerivedValue {
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double pvalue = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

/// Absolute growth-rate moments per model interval: mean mu_eta1*gamma_k,
/// variance psi11*gamma_k^2, and for parallel fits the between-construct
/// covariance psi11_yz*gamma_k_y*gamma_k_z. Indexed [outcome][interval];
/// entries for tied (merged) intervals repeat the shared value.
struct AbsoluteRates {
  std::vector<std::vector<DerivedValue>> mean;
  std::vector<std::vector<DerivedValue>> var;
  std::vector<DerivedValue> cross_cov;  // per interval; empty for univariate
};

AbsoluteRates absolute_rate_moments(const FitResult& fit, const ModelSpec& spec);

/// Intercept-intercept and rate-rate correlations between the two
/// outcomes. The rate correlation is the same in every interval because
/// the relative-rate factors cancel.
struct StandardizedCorrelations {
  DerivedValue intercept;
  DerivedValue rate;
};

StandardizedCorrelations standardized_correlations(const FitResult& fit);

/// Model-implied change from the first listed wave, evaluated on a
/// reference time grid (one time per wave, strictly increasing).
struct ChangeFromBaseline {
  std::vector<int> waves;
  Eigen::VectorXd times;
  std::vector<DerivedValue> change;
};

ChangeFromBaseline change_from_baseline(const FitResult& fit, int outcome_idx,
                                        const std::vector<int>& waves,
                                        const Eigen::VectorXd& wave_times);

struct OutcomeDerived {
  std::string label;
  std::vector<DerivedValue> rate_mean;  // per interval 1..J-1
  std::vector<DerivedValue> rate_var;
  ChangeFromBaseline change;
};

struct DerivedReport {
  std::vector<OutcomeDerived> outcomes;
  std::vector<DerivedValue> rate_cov;  // per interval; empty for univariate
  DerivedValue intercept_cov;
  DerivedValue intercept_corr;
  DerivedValue rate_corr;
};

/// Assembles the full report; change-from-baseline uses the per-wave
/// sample-mean observation times as the reference grid.
DerivedReport build_derived_report(const FitResult& fit, const LongitudinalSample& sample);

}  // namespace lbgm

#endif
