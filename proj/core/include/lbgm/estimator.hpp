#ifndef LBGM_ESTIMATOR_HPP
#define LBGM_ESTIMATOR_HPP

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lbgm/data_model.hpp"
#include "lbgm/model.hpp"

namespace lbgm {

struct FitOptions {
  int max_retries = 10;          // additional starts after the first run
  double deviance_tol = 1e-9;    // relative deviance change at convergence
  /// Relative-gradient norm at convergence:
  /// max_i |g_i| max(1,|x_i|) / max(1,|f|).
  double gradient_tol = 1e-4;
  int max_iterations = 2000;
  double jitter_scale = 0.2;     // relative perturbation of restart values
  std::uint64_t rng_seed = 0;
  bool compute_vcov = true;
  /// Constrain every between-construct parameter to zero (parallel fits
  /// only); the deviance then separates into the two univariate blocks.
  bool fix_cross_to_zero = false;
};

enum class FitStatus { Converged, RetriesExhausted, BoundaryPSD };

std::string to_string(FitStatus status);

/// Identified relative-rate structure of one outcome given a sample.
/// Each model interval is dropped (never spanned by any observation),
/// fixed (scaling interval, rate 1), or belongs to a tie group. A wave
/// skipped by every individual merges its two adjacent intervals into
/// one group, since only their combined span is identified.
struct GammaLayout {
  std::vector<int> group;                 // per interval (0-based): id or -1
  int n_groups = 0;
  int fixed_group = -1;
  std::vector<std::vector<int>> members;  // group id -> interval indices

  std::string group_name(int g, const std::string& label) const;
};

GammaLayout gamma_layout(const LongitudinalSample& sample, const OutcomeModelSpec& outcome);

/// Layout from an explicit set of waves observed anywhere in the data.
GammaLayout gamma_layout_from_waves(const std::vector<int>& observed_waves,
                                    const OutcomeModelSpec& outcome);

/// Flat indexing of the natural parameters of a fitted model. Order per
/// outcome: mu_eta0, mu_eta1, psi00, psi01, psi11, free gammas in
/// ascending interval order, theta_eps; then for parallel fits the cross
/// block psi00, psi01, psi10, psi11, theta_eps.
struct ParameterIndex {
  struct OutcomeOffsets {
    int mu0 = -1, mu1 = -1, psi00 = -1, psi01 = -1, psi11 = -1;
    int gamma_begin = -1, n_gamma = 0;
    int theta = -1;
  };
  std::vector<std::string> names;
  std::vector<OutcomeOffsets> outcome;
  std::vector<GammaLayout> layout;
  int cross_begin = -1;  // -1 when absent (univariate or fixed to zero)
  int dim = 0;

  int index_of(const std::string& name) const;  // -1 if absent
  /// Natural index of gamma for interval k (0-based) of outcome u;
  /// -1 when the interval is fixed or dropped.
  int gamma_index(int u, int interval) const;
};

ParameterIndex build_parameter_index(const LongitudinalSample& sample,
                                     const ModelSpec& spec,
                                     bool fix_cross_to_zero = false);

ParameterIndex build_parameter_index(std::vector<GammaLayout> layouts,
                                     const ModelSpec& spec,
                                     bool fix_cross_to_zero = false);

Eigen::VectorXd pack_parameters(const ParameterIndex& index, const ParameterSet& params);
ParameterSet unpack_parameters(const ParameterIndex& index, const Eigen::VectorXd& theta);

struct FitResult {
  ModelSpec spec;
  ParameterIndex index;
  ParameterSet estimates;
  Eigen::VectorXd natural;  // estimates as a flat natural vector
  Eigen::VectorXd se;       // NaN entries when unavailable
  Eigen::MatrixXd vcov;     // 0x0 when unavailable
  double deviance = std::numeric_limits<double>::quiet_NaN();
  FitStatus status = FitStatus::RetriesExhausted;
  int iterations = 0;
  int retries_used = 0;
  std::size_t n_used = 0;
  std::vector<double> deviance_trace;  // accepted steps of the winning run

  bool vcov_available() const { return vcov.size() > 0; }
};

/// -2 log likelihood under the model: each individual contributes a
/// multivariate-normal term over exactly their observed entries,
/// including the p_i log(2 pi) constant. Throws std::runtime_error
/// naming the individual whose implied covariance is not positive
/// definite.
double fiml_deviance(const ParameterSet& params, const ModelSpec& spec,
                     const LongitudinalSample& sample);

/// Analytic gradient of the deviance with respect to the natural
/// parameter vector (same order as build_parameter_index).
Eigen::VectorXd fiml_deviance_gradient(const ParameterSet& params, const ModelSpec& spec,
                                       const LongitudinalSample& sample);

/// Central-difference gradient of the deviance, step max(1e-5, 1e-5|v|).
Eigen::VectorXd numeric_gradient(const ParameterSet& params, const ModelSpec& spec,
                                 const LongitudinalSample& sample);

/// Central-difference Hessian of the deviance with respect to the
/// natural parameters (differences of the analytic gradient),
/// symmetrized as (H + H^T)/2.
Eigen::MatrixXd numeric_hessian(const ParameterSet& params, const ModelSpec& spec,
                                const LongitudinalSample& sample);

/// Method-of-moments starting values. Throws std::runtime_error when the
/// fixed interval is unobservable (no individual has both endpoints).
ParameterSet starting_values(const LongitudinalSample& sample, const ModelSpec& spec);

/// Maximizes the FIML likelihood by quasi-Newton search on an
/// unconstrained reparameterization (triangular square roots of the
/// covariance blocks), retrying from jittered starts on failure.
FitResult fit(const LongitudinalSample& sample, const ModelSpec& spec,
              const FitOptions& options = {});

/// Per-parameter Wald intervals at the given level; NaN bounds where the
/// standard error is unavailable.
std::vector<std::pair<double, double>> wald_ci(const FitResult& fit_result, double level);

/// Upper quantile of the standard normal (e.g. 0.975 -> 1.959964).
double normal_quantile(double p);

/// Two-sided normal p-value for estimate/se; NaN when se is unavailable
/// or zero.
double wald_pvalue(double estimate, double se);

}  // namespace lbgm

#endif
