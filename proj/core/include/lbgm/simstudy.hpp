#ifndef LBGM_SIMSTUDY_HPP
#define LBGM_SIMSTUDY_HPP

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lbgm/derived.hpp"
#include "lbgm/estimator.hpp"

namespace lbgm {

struct OutcomeDesign {
  std::string label;
  double mu_eta0 = 0.0;
  double psi00 = 1.0;
  double mu_eta1 = 0.0;
  double psi11 = 1.0;
  double rho_within = 0.0;  // corr(eta0, eta1) within the outcome
  double theta_eps = 1.0;
  Eigen::VectorXd gammas;   // length J-1; entry at fixed_interval is 1
  int fixed_interval = 1;
  std::vector<int> missing_waves;  // waves dropped for every individual
};

/// One simulation cell: population values, the shared wave grid, the
/// half-width of the uniform window that individualizes occasions, and
/// the between-construct correlations applied to every growth-factor
/// pair and to the wave-matched residuals.
struct SimulationDesign {
  int n = 0;
  Eigen::VectorXd wave_times;
  double delta = 0.0;
  std::vector<OutcomeDesign> outcomes;
  double rho_between = 0.0;
  double rho_resid = 0.0;

  void check() const;
  ModelSpec model_spec() const;
  /// Population parameters on the design's own scaling.
  ParameterSet true_parameters() const;
};

struct GeneratedData {
  LongitudinalSample sample;
  ParameterSet truth;
};

/// Draws growth factors jointly, individual occasions uniformly around
/// each wave, and wave-matched residual pairs; masked waves are dropped.
GeneratedData generate_dataset(const SimulationDesign& design, std::mt19937_64& rng);

/// Parameter index of the fitted model implied by the design (identical
/// for every replication, since masking is shared by all individuals).
ParameterIndex study_parameter_index(const SimulationDesign& design);

/// Truth per fitted parameter. A merged-interval rate's truth is the
/// length-weighted average of the spanned design rates on the design
/// grid, renormalized to the fitted scaling.
Eigen::VectorXd true_parameter_vector(const SimulationDesign& design,
                                      const ParameterIndex& index);

// Monte Carlo performance metrics per parameter. When truth is zero the
// relative measures fall back to their absolute variants (the caller is
// expected to flag this).
double relative_bias(const std::vector<double>& estimates, double truth);
double empirical_se(const std::vector<double>& estimates);
double relative_rmse(const std::vector<double>& estimates, double truth);
double coverage(const std::vector<std::pair<double, double>>& intervals, double truth);

struct MetricReport {
  std::vector<std::string> parameter_names;
  Eigen::VectorXd truth;
  Eigen::VectorXd relative_bias;
  Eigen::VectorXd empirical_se;
  Eigen::VectorXd relative_rmse;
  Eigen::VectorXd coverage;
  std::vector<bool> absolute_scale;  // truth == 0: bias/rmse are absolute

  int replications = 0;  // convergent replications aggregated
  int attempted = 0;
  double convergence_rate = 0.0;
  long total_fit_retries = 0;
  bool capped = false;  // hard cap of 3S attempts hit before S successes
};

struct ReplicationRecord {
  int attempt = 0;
  bool converged = false;
  int fit_retries = 0;
  Eigen::VectorXd estimates;
  Eigen::VectorXd se;
  Eigen::VectorXd ci_low;
  Eigen::VectorXd ci_high;
};

using FitFunction =
    std::function<FitResult(const LongitudinalSample&, const ModelSpec&, const FitOptions&)>;

struct StudyOptions {
  FitOptions fit;
  double ci_level = 0.95;
  int n_threads = 0;   // 0: hardware concurrency
  FitFunction fit_fn;  // estimator seam; defaults to lbgm::fit
};

struct StudyResult {
  MetricReport metrics;
  /// All attempted replications up to the stopping point, attempt order.
  std::vector<ReplicationRecord> replications;
};

/// Repeats generate -> fit -> Wald CI until `s` convergent solutions (a
/// non-convergent attempt is replaced by fresh data) or 3s attempts.
/// Replication streams derive from (seed, attempt index), so results are
/// identical whether replications run serially or concurrently.
StudyResult run_study(const SimulationDesign& design, int s, std::uint64_t seed,
                      const StudyOptions& options = {});

SimulationDesign design_from_json_text(const std::string& text);
std::string design_to_json_text(const SimulationDesign& design);
SimulationDesign read_design(const std::string& path);
void write_design(const SimulationDesign& design, const std::string& path);

}  // namespace lbgm

#endif
