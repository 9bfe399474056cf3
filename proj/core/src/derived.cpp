#include "lbgm/derived.hpp"

#include <cmath>
#include <stdexcept>

namespace lbgm {

namespace {

// First-order delta method: var = grad' vcov grad over the listed
// (parameter index, coefficient) pairs. Indices of -1 (fixed quantities)
// are skipped.
DerivedValue delta_value(const FitResult& fit, double estimate,
                         const std::vector<std::pair<int, double>>& grad) {
  DerivedValue out;
  out.estimate = estimate;
  out.defined = std::isfinite(estimate);
  if (!out.defined || !fit.vcov_available()) return out;
  double var = 0.0;
  for (const auto& [i, gi] : grad) {
    if (i < 0) continue;
    for (const auto& [j, gj] : grad) {
      if (j < 0) continue;
      var += gi * fit.vcov(i, j) * gj;
    }
  }
  out.se = std::sqrt(std::max(var, 0.0));
  out.pvalue = wald_pvalue(estimate, out.se);
  return out;
}

}  // namespace

AbsoluteRates absolute_rate_moments(const FitResult& fit, const ModelSpec& spec) {
  const int m = static_cast<int>(spec.outcomes.size());
  AbsoluteRates out;
  out.mean.resize(m);
  out.var.resize(m);

  for (int u = 0; u < m; ++u) {
    const auto& p = fit.estimates.outcomes[u];
    const auto& off = fit.index.outcome[u];
    const int n_intervals = static_cast<int>(p.gamma.size());
    out.mean[u].resize(n_intervals);
    out.var[u].resize(n_intervals);
    for (int k = 0; k < n_intervals; ++k) {
      const double g = p.gamma[k];
      if (!std::isfinite(g)) continue;  // interval outside the observed span
      const int gi = fit.index.gamma_index(u, k);
      out.mean[u][k] = delta_value(fit, p.mu_eta1 * g,
                                   {{off.mu1, g}, {gi, p.mu_eta1}});
      out.var[u][k] = delta_value(fit, p.psi11 * g * g,
                                  {{off.psi11, g * g}, {gi, 2.0 * p.psi11 * g}});
    }
  }

  if (m == 2 && fit.index.cross_begin >= 0) {
    const int c11 = fit.index.cross_begin + 3;
    const double psi11_yz = fit.estimates.cross.psi11;
    const int n = static_cast<int>(std::min(fit.estimates.outcomes[0].gamma.size(),
                                            fit.estimates.outcomes[1].gamma.size()));
    out.cross_cov.resize(n);
    for (int k = 0; k < n; ++k) {
      const double gy = fit.estimates.outcomes[0].gamma[k];
      const double gz = fit.estimates.outcomes[1].gamma[k];
      if (!std::isfinite(gy) || !std::isfinite(gz)) continue;
      out.cross_cov[k] = delta_value(fit, psi11_yz * gy * gz,
                                     {{c11, gy * gz},
                                      {fit.index.gamma_index(0, k), psi11_yz * gz},
                                      {fit.index.gamma_index(1, k), psi11_yz * gy}});
    }
  }
  return out;
}

StandardizedCorrelations standardized_correlations(const FitResult& fit) {
  if (fit.index.cross_begin < 0)
    throw std::invalid_argument("standardized correlations need a parallel fit "
                                "with free between-construct parameters");
  const auto& y = fit.estimates.outcomes[0];
  const auto& z = fit.estimates.outcomes[1];
  if (y.psi00 <= 0.0 || z.psi00 <= 0.0 || y.psi11 <= 0.0 || z.psi11 <= 0.0)
    throw std::invalid_argument("zero variance component in correlation");

  const auto& oy = fit.index.outcome[0];
  const auto& oz = fit.index.outcome[1];
  StandardizedCorrelations out;

  const double icorr = fit.estimates.cross.psi00 / std::sqrt(y.psi00 * z.psi00);
  out.intercept = delta_value(fit, icorr,
                              {{fit.index.cross_begin + 0, 1.0 / std::sqrt(y.psi00 * z.psi00)},
                               {oy.psi00, -0.5 * icorr / y.psi00},
                               {oz.psi00, -0.5 * icorr / z.psi00}});

  const double rcorr = fit.estimates.cross.psi11 / std::sqrt(y.psi11 * z.psi11);
  out.rate = delta_value(fit, rcorr,
                         {{fit.index.cross_begin + 3, 1.0 / std::sqrt(y.psi11 * z.psi11)},
                          {oy.psi11, -0.5 * rcorr / y.psi11},
                          {oz.psi11, -0.5 * rcorr / z.psi11}});
  return out;
}

ChangeFromBaseline change_from_baseline(const FitResult& fit, int outcome_idx,
                                        const std::vector<int>& waves,
                                        const Eigen::VectorXd& wave_times) {
  if (waves.empty() || wave_times.size() != static_cast<int>(waves.size()))
    throw std::invalid_argument("change_from_baseline: empty or mismatched wave grid");
  for (int k = 1; k < wave_times.size(); ++k)
    if (wave_times[k] <= wave_times[k - 1])
      throw std::invalid_argument("change_from_baseline: times must be increasing");

  const auto& p = fit.estimates.outcomes[outcome_idx];
  const auto& off = fit.index.outcome[outcome_idx];
  const int j = static_cast<int>(p.gamma.size()) + 1;
  const LoadingWeights w = interval_weights(waves, wave_times, j, wave_times[0]);
  const Eigen::VectorXd loading = shape_loadings(w, p.gamma);

  ChangeFromBaseline out;
  out.waves = waves;
  out.times = wave_times;
  out.change.resize(waves.size());
  for (std::size_t r = 0; r < waves.size(); ++r) {
    std::vector<std::pair<int, double>> grad{{off.mu1, loading[r]}};
    const GammaLayout& lay = fit.index.layout[outcome_idx];
    for (int g = 0; g < lay.n_groups; ++g) {
      if (g == lay.fixed_group) continue;
      double wg = 0.0;
      for (int interval : lay.members[g]) wg += w.weights(static_cast<int>(r), interval);
      if (wg != 0.0)
        grad.emplace_back(fit.index.gamma_index(outcome_idx, lay.members[g].front()),
                          p.mu_eta1 * wg);
    }
    out.change[r] = delta_value(fit, p.mu_eta1 * loading[r], grad);
    if (r == 0) {  // baseline: zero change with zero uncertainty
      out.change[r].se = 0.0;
      out.change[r].pvalue = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return out;
}

DerivedReport build_derived_report(const FitResult& fit, const LongitudinalSample& sample) {
  DerivedReport report;
  const AbsoluteRates rates = absolute_rate_moments(fit, fit.spec);
  const int m = static_cast<int>(fit.spec.outcomes.size());
  for (int u = 0; u < m; ++u) {
    OutcomeDerived od;
    od.label = fit.spec.outcomes[u].label;
    od.rate_mean = rates.mean[u];
    od.rate_var = rates.var[u];

    const int sample_idx = sample.outcome_index(od.label);
    const auto waves = sample.observed_waves_anywhere(sample_idx);
    const auto mean_times = sample.mean_wave_times(sample_idx);
    Eigen::VectorXd times(waves.size());
    for (std::size_t k = 0; k < waves.size(); ++k) times[k] = mean_times.at(waves[k]);
    od.change = change_from_baseline(fit, u, waves, times);
    report.outcomes.push_back(std::move(od));
  }
  report.rate_cov = rates.cross_cov;
  if (fit.index.cross_begin >= 0) {
    report.intercept_cov.estimate = fit.estimates.cross.psi00;
    report.intercept_cov.defined = true;
    report.intercept_cov.se = fit.se[fit.index.cross_begin + 0];
    report.intercept_cov.pvalue =
        wald_pvalue(report.intercept_cov.estimate, report.intercept_cov.se);
    const auto corr = standardized_correlations(fit);
    report.intercept_corr = corr.intercept;
    report.rate_corr = corr.rate;
  }
  return report;
}

}  // namespace lbgm
