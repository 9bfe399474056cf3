#ifndef LBGM_MODEL_HPP
#define LBGM_MODEL_HPP

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lbgm/data_model.hpp"

namespace lbgm {

/// Model declaration for one outcome: wave count J and the interval
/// (1..J-1) whose absolute growth rate the shape factor represents; the
/// relative rate of that interval is fixed to 1.
struct OutcomeModelSpec {
  std::string label;
  int waves = 0;
  int fixed_interval = 1;
};

struct ModelSpec {
  std::vector<OutcomeModelSpec> outcomes;  // 1 (univariate) or 2 (parallel)

  bool parallel() const { return outcomes.size() == 2; }
  int outcome_index(const std::string& label) const;
  /// Throws std::invalid_argument if J < 3, fixed_interval is out of
  /// range, or the outcome count is not 1 or 2.
  void check() const;
};

/// Growth-factor and residual parameters for one outcome. `gamma` holds
/// the relative rate of every model interval (length J-1); the fixed
/// interval's entry is exactly 1. Entries for intervals never spanned by
/// any observation may be NaN in fitted parameter sets.
struct OutcomeParameters {
  double mu_eta0 = 0.0;
  double mu_eta1 = 0.0;
  double psi00 = 1.0;
  double psi01 = 0.0;
  double psi11 = 1.0;
  Eigen::VectorXd gamma;
  double theta_eps = 1.0;
};

/// Between-construct blocks: covariances of (intercept, shape) pairs
/// across the two outcomes, plus the wave-aligned residual covariance.
struct CrossParameters {
  double psi00 = 0.0;  // cov(eta0_y, eta0_z)
  double psi01 = 0.0;  // cov(eta0_y, eta1_z)
  double psi10 = 0.0;  // cov(eta1_y, eta0_z)
  double psi11 = 0.0;  // cov(eta1_y, eta1_z)
  double theta_eps = 0.0;
};

struct ParameterSet {
  std::vector<OutcomeParameters> outcomes;
  CrossParameters cross;

  bool parallel() const { return outcomes.size() == 2; }
  /// Joint growth-factor covariance, ordered (eta0, eta1) per outcome:
  /// 2x2 for univariate, 4x4 for parallel models.
  Eigen::MatrixXd growth_factor_covariance() const;
  /// Residual covariance per wave: [theta_y] or [[theta_y, theta_yz],
  /// [theta_yz, theta_z]].
  Eigen::MatrixXd residual_covariance() const;
};

/// Time spanned by each model interval between an individual's baseline
/// and each observed occasion. Rows follow the observed waves; column
/// k-1 is model interval k. Boundaries of waves the individual skipped
/// are placed by linear interpolation between the neighboring observed
/// times, so a merged gap is split evenly among the intervals it spans.
struct LoadingWeights {
  std::vector<int> waves;
  Eigen::VectorXd times;
  Eigen::MatrixXd weights;  // p x (J-1)
};

LoadingWeights interval_weights(const std::vector<int>& observed_waves,
                                const Eigen::VectorXd& times, int declared_waves,
                                double baseline_time);

/// Shape-factor loading per observed occasion: sum over intervals of
/// gamma_k times the spanned length. Zero-weight intervals are skipped,
/// so NaN gammas on never-spanned intervals are harmless.
Eigen::VectorXd shape_loadings(const LoadingWeights& w, const Eigen::VectorXd& gammas);

/// Factor-loading matrix for one outcome: rows (1, L_j) with L_j the
/// change-from-baseline at occasion j divided by the shape factor. For
/// complete data L_j is the cumulative sum of gamma_{k-1} (t_k - t_{k-1}).
Eigen::MatrixXd build_loading_matrix(const Eigen::VectorXd& times,
                                     const Eigen::VectorXd& gammas,
                                     const std::vector<int>& observed_waves,
                                     double baseline_time);

/// Model-implied mean vector and covariance matrix over one individual's
/// observed entries, both outcomes stacked (y block first).
struct ImpliedMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::vector<std::pair<int, int>> entry_index;  // (outcome index, wave)
};

ImpliedMoments implied_moments(const ModelSpec& spec, const ParameterSet& params,
                               const Individual& individual);

/// Re-expresses the parameters when the shape factor is scaled to a
/// different interval. Implied moments are invariant under this map.
/// Throws std::invalid_argument when the specs differ beyond the fixed
/// intervals or the new fixed interval has a zero/undefined rate.
ParameterSet rescale_parameters(const ParameterSet& params, const ModelSpec& from,
                                const ModelSpec& to);

ModelSpec model_spec_from_json_text(const std::string& text);
std::string model_spec_to_json_text(const ModelSpec& spec);
ModelSpec read_model_spec(const std::string& path);
void write_model_spec(const ModelSpec& spec, const std::string& path);

}  // namespace lbgm

#endif
