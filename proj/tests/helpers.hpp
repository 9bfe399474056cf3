// Shared fixtures and independent oracles for the test suites. The
// oracles deliberately avoid the library's evaluation path: moments come
// from plain nested loops over Eq.-style cumulative sums, and the normal
// density uses Gaussian elimination rather than a Cholesky solve.
#ifndef LBGM_TESTS_HELPERS_HPP
#define LBGM_TESTS_HELPERS_HPP

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "lbgm/data_model.hpp"
#include "lbgm/model.hpp"

namespace lbgm::test {

inline OutcomeSeries make_series(const std::string& label, int waves,
                                 const std::vector<std::array<double, 3>>& rows) {
  OutcomeSeries s;
  s.outcome_label = label;
  s.waves = waves;
  for (const auto& r : rows)
    s.observations.push_back({static_cast<int>(r[0]), r[1], r[2]});
  return s;
}

inline Individual make_individual(const std::string& id, std::vector<OutcomeSeries> series) {
  return Individual{id, std::move(series)};
}

inline LongitudinalSample make_sample(std::vector<std::string> labels,
                                      std::vector<Individual> individuals) {
  LongitudinalSample s;
  s.outcome_labels = std::move(labels);
  s.individuals = std::move(individuals);
  return s;
}

// Complete-data shape loadings: the plain cumulative sum over intervals.
inline std::vector<double> oracle_cumulative_loadings(const std::vector<double>& gammas,
                                                      const std::vector<double>& times) {
  std::vector<double> loading(times.size(), 0.0);
  for (std::size_t j = 1; j < times.size(); ++j)
    loading[j] = loading[j - 1] + gammas[j - 1] * (times[j] - times[j - 1]);
  return loading;
}

// -2 log density of a multivariate normal via Gauss-Jordan elimination
// with partial pivoting (determinant from the pivots, solve for the
// quadratic form). Small and slow on purpose.
inline double oracle_mvn_m2ll(std::vector<double> x, const std::vector<double>& mean,
                              std::vector<std::vector<double>> cov) {
  const std::size_t p = x.size();
  for (std::size_t i = 0; i < p; ++i) x[i] -= mean[i];
  std::vector<double> rhs = x;

  double logdet = 0.0;
  double sign = 1.0;
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < p; ++r)
      if (std::abs(cov[r][col]) > std::abs(cov[pivot][col])) pivot = r;
    if (cov[pivot][col] == 0.0) throw std::runtime_error("oracle: singular covariance");
    if (pivot != col) {
      std::swap(cov[pivot], cov[col]);
      std::swap(rhs[pivot], rhs[col]);
      sign = -sign;
    }
    logdet += std::log(std::abs(cov[col][col]));
    if (cov[col][col] < 0.0) sign = -sign;
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = cov[r][col] / cov[col][col];
      for (std::size_t c = col; c < p; ++c) cov[r][c] -= f * cov[col][c];
      rhs[r] -= f * rhs[col];
    }
  }
  if (sign < 0.0) throw std::runtime_error("oracle: negative determinant");
  double quad = 0.0;
  for (std::size_t i = 0; i < p; ++i) quad += x[i] * rhs[i] / cov[i][i];
  return static_cast<double>(p) * std::log(2.0 * std::acos(-1.0)) + logdet + quad;
}

// Implied moments of one individual with complete data, built from plain
// loops (no Eigen products): stacked mean and covariance with the
// wave-matched residual structure.
struct OracleMoments {
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;
};

inline OracleMoments oracle_complete_moments(const ParameterSet& params,
                                             const std::vector<std::vector<double>>& times) {
  const std::size_t m = params.outcomes.size();
  std::vector<std::vector<double>> loading(m);
  std::vector<std::size_t> offset(m, 0);
  std::size_t total = 0;
  for (std::size_t u = 0; u < m; ++u) {
    std::vector<double> g(params.outcomes[u].gamma.data(),
                          params.outcomes[u].gamma.data() + params.outcomes[u].gamma.size());
    loading[u] = oracle_cumulative_loadings(g, times[u]);
    offset[u] = total;
    total += times[u].size();
  }
  OracleMoments out;
  out.mean.assign(total, 0.0);
  out.cov.assign(total, std::vector<double>(total, 0.0));

  for (std::size_t u = 0; u < m; ++u)
    for (std::size_t j = 0; j < times[u].size(); ++j)
      out.mean[offset[u] + j] =
          params.outcomes[u].mu_eta0 + params.outcomes[u].mu_eta1 * loading[u][j];

  auto psi = [&params](std::size_t u, std::size_t v, int a, int b) {
    if (u == v) {
      const auto& p = params.outcomes[u];
      if (a == 0 && b == 0) return p.psi00;
      if (a == 1 && b == 1) return p.psi11;
      return p.psi01;
    }
    const auto& c = params.cross;
    if (u > v) std::swap(a, b);  // cross block is cov(eta_y, eta_z)
    if (a == 0 && b == 0) return c.psi00;
    if (a == 0 && b == 1) return c.psi01;
    if (a == 1 && b == 0) return c.psi10;
    return c.psi11;
  };

  for (std::size_t u = 0; u < m; ++u)
    for (std::size_t v = 0; v < m; ++v)
      for (std::size_t i = 0; i < times[u].size(); ++i)
        for (std::size_t j = 0; j < times[v].size(); ++j) {
          double value = psi(u, v, 0, 0) + loading[v][j] * psi(u, v, 0, 1) +
                         loading[u][i] * psi(u, v, 1, 0) +
                         loading[u][i] * loading[v][j] * psi(u, v, 1, 1);
          if (u == v && i == j) value += params.outcomes[u].theta_eps;
          if (u != v && i == j) value += params.cross.theta_eps;
          out.cov[offset[u] + i][offset[v] + j] = value;
        }
  return out;
}

// Valid random parameters: correlations kept moderate so every assembled
// covariance is comfortably positive definite.
inline ParameterSet random_parameters(std::mt19937_64& rng, int waves, bool parallel,
                                      int fixed_interval = 1) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  ParameterSet p;
  const int m = parallel ? 2 : 1;
  for (int u = 0; u < m; ++u) {
    OutcomeParameters o;
    o.mu_eta0 = uni(20.0, 60.0);
    o.mu_eta1 = uni(1.0, 6.0);
    o.psi00 = uni(4.0, 30.0);
    o.psi11 = uni(0.4, 2.0);
    o.psi01 = uni(-0.5, 0.5) * std::sqrt(o.psi00 * o.psi11);
    o.theta_eps = uni(0.5, 2.0);
    o.gamma.resize(waves - 1);
    for (int k = 0; k < waves - 1; ++k) o.gamma[k] = uni(0.2, 1.5);
    o.gamma[fixed_interval - 1] = 1.0;
    p.outcomes.push_back(std::move(o));
  }
  if (parallel) {
    const double r = uni(-0.35, 0.35);
    p.cross.psi00 = r * std::sqrt(p.outcomes[0].psi00 * p.outcomes[1].psi00);
    p.cross.psi01 = r * std::sqrt(p.outcomes[0].psi00 * p.outcomes[1].psi11);
    p.cross.psi10 = r * std::sqrt(p.outcomes[0].psi11 * p.outcomes[1].psi00);
    p.cross.psi11 = r * std::sqrt(p.outcomes[0].psi11 * p.outcomes[1].psi11);
    p.cross.theta_eps =
        uni(-0.4, 0.4) * std::sqrt(p.outcomes[0].theta_eps * p.outcomes[1].theta_eps);
  }
  return p;
}

// Complete-data sample on a shared wave grid with mild time jitter.
inline LongitudinalSample random_complete_sample(std::mt19937_64& rng, int n, int waves,
                                                 bool parallel,
                                                 const ParameterSet& params) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  const int m = parallel ? 2 : 1;
  LongitudinalSample sample;
  sample.outcome_labels = parallel ? std::vector<std::string>{"y", "z"}
                                   : std::vector<std::string>{"y"};
  for (int i = 0; i < n; ++i) {
    std::vector<double> times(waves);
    for (int w = 0; w < waves; ++w) times[w] = w + jitter(rng);
    Individual ind;
    ind.id = "id" + std::to_string(i + 1);
    for (int u = 0; u < m; ++u) {
      OutcomeSeries s;
      s.outcome_label = sample.outcome_labels[u];
      s.waves = waves;
      const auto& o = params.outcomes[u];
      std::vector<double> g(o.gamma.data(), o.gamma.data() + o.gamma.size());
      const auto loading = oracle_cumulative_loadings(g, times);
      const double eta0 = o.mu_eta0 + std::sqrt(o.psi00) * normal(rng);
      const double eta1 = o.mu_eta1 + std::sqrt(o.psi11) * normal(rng);
      for (int w = 0; w < waves; ++w) {
        const double value =
            eta0 + eta1 * loading[w] + std::sqrt(o.theta_eps) * normal(rng);
        s.observations.push_back({w + 1, times[w], value});
      }
      ind.series.push_back(std::move(s));
    }
    sample.individuals.push_back(std::move(ind));
  }
  return sample;
}

}  // namespace lbgm::test

#endif
