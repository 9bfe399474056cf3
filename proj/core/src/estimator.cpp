#include "lbgm/estimator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

#include "lbgm/lbfgs.hpp"

namespace lbgm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kBoundaryRelTol = 1e-6;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

// Exact accumulation of doubles into non-overlapping partials
// (Shewchuk-style). Folding sorted per-individual likelihood terms this
// way makes the deviance independent of individual order at the bit
// level and additive under sample duplication.
void exact_add(std::vector<double>& partials, double x) {
  std::size_t used = 0;
  for (double y : partials) {
    if (std::abs(x) < std::abs(y)) std::swap(x, y);
    const double hi = x + y;
    const double lo = y - (hi - x);
    if (lo != 0.0) partials[used++] = lo;
    x = hi;
  }
  partials.resize(used);
  partials.push_back(x);
}

double exact_total(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  std::vector<double> partials;
  for (double t : terms) exact_add(partials, t);
  double total = 0.0;
  for (double p : partials) total += p;
  return total;
}
}  // namespace

std::string to_string(FitStatus status) {
  switch (status) {
    case FitStatus::Converged: return "Converged";
    case FitStatus::RetriesExhausted: return "RetriesExhausted";
    case FitStatus::BoundaryPSD: return "BoundaryPSD";
  }
  return "Unknown";
}

std::string GammaLayout::group_name(int g, const std::string& label) const {
  std::ostringstream os;
  os << "gamma";
  for (std::size_t k = 0; k < members[g].size(); ++k) {
    if (k > 0) os << '_';
    os << members[g][k] + 1;  // 1-based interval index
  }
  os << '[' << label << ']';
  return os.str();
}

GammaLayout gamma_layout(const LongitudinalSample& sample, const OutcomeModelSpec& outcome) {
  const int idx = sample.outcome_index(outcome.label);
  if (idx < 0)
    throw std::invalid_argument("outcome '" + outcome.label + "' not present in data");
  return gamma_layout_from_waves(sample.observed_waves_anywhere(idx), outcome);
}

GammaLayout gamma_layout_from_waves(const std::vector<int>& observed,
                                    const OutcomeModelSpec& outcome) {
  if (observed.empty())
    throw std::invalid_argument("outcome '" + outcome.label + "' has no observations");
  if (observed.back() > outcome.waves)
    throw std::invalid_argument("outcome '" + outcome.label +
                                "' has observations beyond declared wave count");
  const std::set<int> obs(observed.begin(), observed.end());
  const int w_lo = observed.front();
  const int w_hi = observed.back();

  GammaLayout layout;
  layout.group.assign(outcome.waves - 1, -1);
  int gid = -1;
  for (int k = w_lo; k <= w_hi - 1; ++k) {  // 1-based interval k spans waves k, k+1
    if (k == w_lo || obs.count(k) > 0) {
      ++gid;
      layout.members.emplace_back();
    }
    layout.group[k - 1] = gid;
    layout.members[gid].push_back(k - 1);
  }
  layout.n_groups = gid + 1;
  if (layout.n_groups == 0) {
    layout.fixed_group = -1;  // single observed wave; no rate is identified
    return layout;
  }
  if (outcome.fixed_interval - 1 >= static_cast<int>(layout.group.size()) ||
      layout.group[outcome.fixed_interval - 1] < 0)
    throw std::invalid_argument("fixed interval " + std::to_string(outcome.fixed_interval) +
                                " of outcome '" + outcome.label +
                                "' lies outside the observed span");
  layout.fixed_group = layout.group[outcome.fixed_interval - 1];
  return layout;
}

int ParameterIndex::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < names.size(); ++k)
    if (names[k] == name) return static_cast<int>(k);
  return -1;
}

int ParameterIndex::gamma_index(int u, int interval) const {
  const GammaLayout& lay = layout[u];
  if (interval < 0 || interval >= static_cast<int>(lay.group.size())) return -1;
  const int g = lay.group[interval];
  if (g < 0 || g == lay.fixed_group) return -1;
  const int pos = g < lay.fixed_group ? g : g - 1;
  return outcome[u].gamma_begin + pos;
}

ParameterIndex build_parameter_index(const LongitudinalSample& sample, const ModelSpec& spec,
                                     bool fix_cross_to_zero) {
  std::vector<GammaLayout> layouts;
  for (const auto& o : spec.outcomes) layouts.push_back(gamma_layout(sample, o));
  return build_parameter_index(std::move(layouts), spec, fix_cross_to_zero);
}

ParameterIndex build_parameter_index(std::vector<GammaLayout> layouts, const ModelSpec& spec,
                                     bool fix_cross_to_zero) {
  spec.check();
  if (layouts.size() != spec.outcomes.size())
    throw std::invalid_argument("one gamma layout per outcome is required");
  ParameterIndex index;
  int pos = 0;
  for (std::size_t u = 0; u < spec.outcomes.size(); ++u) {
    const auto& o = spec.outcomes[u];
    GammaLayout lay = std::move(layouts[u]);
    ParameterIndex::OutcomeOffsets off;
    auto push = [&](int& slot, const std::string& name) {
      slot = pos++;
      index.names.push_back(name + "[" + o.label + "]");
    };
    push(off.mu0, "mu_eta0");
    push(off.mu1, "mu_eta1");
    push(off.psi00, "psi00");
    push(off.psi01, "psi01");
    push(off.psi11, "psi11");
    off.gamma_begin = pos;
    for (int g = 0; g < lay.n_groups; ++g) {
      if (g == lay.fixed_group) continue;
      index.names.push_back(lay.group_name(g, o.label));
      ++pos;
    }
    off.n_gamma = pos - off.gamma_begin;
    push(off.theta, "theta_eps");
    index.outcome.push_back(off);
    index.layout.push_back(std::move(lay));
  }
  if (spec.parallel() && !fix_cross_to_zero) {
    index.cross_begin = pos;
    for (const char* nm : {"psi00[yz]", "psi01[yz]", "psi10[yz]", "psi11[yz]",
                           "theta_eps[yz]"}) {
      index.names.emplace_back(nm);
      ++pos;
    }
  }
  index.dim = pos;
  return index;
}

Eigen::VectorXd pack_parameters(const ParameterIndex& index, const ParameterSet& params) {
  Eigen::VectorXd theta(index.dim);
  for (std::size_t u = 0; u < index.outcome.size(); ++u) {
    const auto& off = index.outcome[u];
    const auto& p = params.outcomes[u];
    theta[off.mu0] = p.mu_eta0;
    theta[off.mu1] = p.mu_eta1;
    theta[off.psi00] = p.psi00;
    theta[off.psi01] = p.psi01;
    theta[off.psi11] = p.psi11;
    const GammaLayout& lay = index.layout[u];
    int k = off.gamma_begin;
    for (int g = 0; g < lay.n_groups; ++g) {
      if (g == lay.fixed_group) continue;
      theta[k++] = p.gamma[lay.members[g].front()];
    }
    theta[off.theta] = p.theta_eps;
  }
  if (index.cross_begin >= 0) {
    theta[index.cross_begin + 0] = params.cross.psi00;
    theta[index.cross_begin + 1] = params.cross.psi01;
    theta[index.cross_begin + 2] = params.cross.psi10;
    theta[index.cross_begin + 3] = params.cross.psi11;
    theta[index.cross_begin + 4] = params.cross.theta_eps;
  }
  return theta;
}

ParameterSet unpack_parameters(const ParameterIndex& index, const Eigen::VectorXd& theta) {
  ParameterSet params;
  for (std::size_t u = 0; u < index.outcome.size(); ++u) {
    const auto& off = index.outcome[u];
    const GammaLayout& lay = index.layout[u];
    OutcomeParameters p;
    p.mu_eta0 = theta[off.mu0];
    p.mu_eta1 = theta[off.mu1];
    p.psi00 = theta[off.psi00];
    p.psi01 = theta[off.psi01];
    p.psi11 = theta[off.psi11];
    p.theta_eps = theta[off.theta];
    p.gamma = Eigen::VectorXd::Constant(static_cast<int>(lay.group.size()), kNaN);
    int k = off.gamma_begin;
    for (int g = 0; g < lay.n_groups; ++g) {
      const double value = (g == lay.fixed_group) ? 1.0 : theta[k++];
      for (int interval : lay.members[g]) p.gamma[interval] = value;
    }
    params.outcomes.push_back(std::move(p));
  }
  if (index.cross_begin >= 0) {
    params.cross.psi00 = theta[index.cross_begin + 0];
    params.cross.psi01 = theta[index.cross_begin + 1];
    params.cross.psi10 = theta[index.cross_begin + 2];
    params.cross.psi11 = theta[index.cross_begin + 3];
    params.cross.theta_eps = theta[index.cross_begin + 4];
  }
  return params;
}

// ---------------------------------------------------------------------------
// FIML evaluation context: per-individual loading weights and stacked
// observations, computed once per (sample, spec). The deviance and its
// analytic gradient are evaluated against it. A context serves a single
// fit at a time (internal scratch buffers are reused between calls).
// ---------------------------------------------------------------------------

namespace {

struct IndividualData {
  std::string id;
  Eigen::VectorXd x;
  int p_total = 0;
  std::array<int, 2> row_begin{0, 0};
  std::array<int, 2> p{0, 0};
  std::array<Eigen::MatrixXd, 2> weights;            // p_u x (J_u - 1)
  std::vector<std::pair<int, int>> cross_pairs;      // same-wave rows (y, z)
};

struct GradientParts {
  Eigen::VectorXd mean;                 // d dev / d factor means (2m)
  Eigen::MatrixXd psi;                  // full-matrix gradient wrt Psi (2m x 2m)
  Eigen::MatrixXd resid;                // full-matrix gradient wrt R (m x m)
  std::vector<Eigen::VectorXd> gamma;   // per outcome, per free-group slot
};

class FimlContext {
 public:
  FimlContext(const LongitudinalSample& sample, const ModelSpec& spec, bool fix_cross)
      : spec_(spec), fix_cross_(fix_cross && spec.parallel()),
        index_(build_parameter_index(sample, spec, fix_cross)),
        m_(static_cast<int>(spec.outcomes.size())) {
    data_.reserve(sample.n());
    for (const auto& ind : sample.individuals) {
      IndividualData d;
      d.id = ind.id;
      int total = 0;
      for (int u = 0; u < m_; ++u) {
        const OutcomeSeries* s = ind.series_for(spec.outcomes[u].label);
        if (s == nullptr || s->observations.empty())
          throw std::invalid_argument("individual '" + ind.id +
                                      "' lacks observations for outcome '" +
                                      spec.outcomes[u].label + "'");
        const int p = static_cast<int>(s->observations.size());
        std::vector<int> waves(p);
        Eigen::VectorXd times(p);
        for (int r = 0; r < p; ++r) {
          waves[r] = s->observations[r].wave;
          times[r] = s->observations[r].time;
        }
        d.row_begin[u] = total;
        d.p[u] = p;
        d.weights[u] =
            interval_weights(waves, times, spec.outcomes[u].waves, times[0]).weights;
        total += p;
      }
      d.p_total = total;
      d.x.resize(total);
      int row = 0;
      for (int u = 0; u < m_; ++u) {
        const OutcomeSeries* s = ind.series_for(spec.outcomes[u].label);
        for (const auto& obs : s->observations) d.x[row++] = obs.value;
      }
      if (m_ == 2) {
        const OutcomeSeries* sy = ind.series_for(spec.outcomes[0].label);
        const OutcomeSeries* sz = ind.series_for(spec.outcomes[1].label);
        for (int a = 0; a < d.p[0]; ++a)
          for (int b = 0; b < d.p[1]; ++b)
            if (sy->observations[a].wave == sz->observations[b].wave)
              d.cross_pairs.emplace_back(a, d.row_begin[1] + b);
      }
      data_.push_back(std::move(d));
    }
  }

  const ParameterIndex& index() const { return index_; }
  const ModelSpec& spec() const { return spec_; }
  std::size_t n() const { return data_.size(); }

  double deviance(const ParameterSet& params, std::string* offending = nullptr) const {
    return evaluate(params, nullptr, offending);
  }

  double deviance_gradient(const ParameterSet& params, Eigen::VectorXd& grad,
                           std::string* offending = nullptr) const {
    GradientParts parts;
    const double dev = evaluate(params, &parts, offending);
    if (std::isfinite(dev)) grad = assemble_natural_gradient(parts);
    return dev;
  }

  // --- unconstrained reparameterization -----------------------------------

  int udim() const {
    int n = 2 * m_;
    n += fix_cross_ ? 6 : (m_ == 1 ? 3 : 10);        // Psi square roots
    for (const auto& off : index_.outcome) n += off.n_gamma;
    n += fix_cross_ ? 2 : (m_ == 1 ? 1 : 3);         // residual square roots
    return n;
  }

  Eigen::VectorXd to_unconstrained(const ParameterSet& params) const {
    Eigen::VectorXd x(udim());
    int pos = 0;
    for (int u = 0; u < m_; ++u) {
      x[pos++] = params.outcomes[u].mu_eta0;
      x[pos++] = params.outcomes[u].mu_eta1;
    }
    const Eigen::MatrixXd psi = params.growth_factor_covariance();
    if (fix_cross_) {
      for (int u = 0; u < 2; ++u)
        pack_cholesky(repaired_cholesky(psi.block(2 * u, 2 * u, 2, 2)), x, pos);
    } else {
      pack_cholesky(repaired_cholesky(psi), x, pos);
    }
    for (int u = 0; u < m_; ++u) {
      const GammaLayout& lay = index_.layout[u];
      for (int g = 0; g < lay.n_groups; ++g) {
        if (g == lay.fixed_group) continue;
        x[pos++] = params.outcomes[u].gamma[lay.members[g].front()];
      }
    }
    if (fix_cross_) {
      for (int u = 0; u < 2; ++u)
        x[pos++] = 0.5 * std::log(std::max(params.outcomes[u].theta_eps, 1e-12));
    } else {
      pack_cholesky(repaired_cholesky(params.residual_covariance()), x, pos);
    }
    return x;
  }

  ParameterSet from_unconstrained(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd l_psi, l_res;
    return build(x, l_psi, l_res);
  }

  double objective(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
    Eigen::MatrixXd l_psi, l_res;
    const ParameterSet params = build(x, l_psi, l_res);
    if (grad == nullptr) return evaluate(params, nullptr, nullptr);

    GradientParts parts;
    const double dev = evaluate(params, &parts, nullptr);
    if (!std::isfinite(dev)) return dev;

    Eigen::VectorXd& gx = *grad;
    gx.resize(udim());
    int pos = 0;
    for (int u = 0; u < m_; ++u) {
      gx[pos++] = parts.mean[2 * u];
      gx[pos++] = parts.mean[2 * u + 1];
    }
    if (fix_cross_) {
      for (int u = 0; u < 2; ++u) {
        const Eigen::MatrixXd gl =
            2.0 * parts.psi.block(2 * u, 2 * u, 2, 2) * l_psi.block(2 * u, 2 * u, 2, 2);
        pack_cholesky_gradient(gl, l_psi.block(2 * u, 2 * u, 2, 2), gx, pos);
      }
    } else {
      const Eigen::MatrixXd gl = 2.0 * parts.psi * l_psi;
      pack_cholesky_gradient(gl, l_psi, gx, pos);
    }
    for (int u = 0; u < m_; ++u)
      for (int slot = 0; slot < index_.outcome[u].n_gamma; ++slot)
        gx[pos++] = parts.gamma[u][slot];
    if (fix_cross_) {
      for (int u = 0; u < 2; ++u)
        gx[pos++] = 2.0 * parts.resid(u, u) * params.outcomes[u].theta_eps;
    } else {
      const Eigen::MatrixXd gm = 2.0 * parts.resid * l_res;
      pack_cholesky_gradient(gm, l_res, gx, pos);
    }
    return dev;
  }

  Eigen::VectorXd assemble_natural_gradient(const GradientParts& parts) const {
    Eigen::VectorXd grad(index_.dim);
    for (int u = 0; u < m_; ++u) {
      const auto& off = index_.outcome[u];
      grad[off.mu0] = parts.mean[2 * u];
      grad[off.mu1] = parts.mean[2 * u + 1];
      grad[off.psi00] = parts.psi(2 * u, 2 * u);
      grad[off.psi01] = 2.0 * parts.psi(2 * u, 2 * u + 1);
      grad[off.psi11] = parts.psi(2 * u + 1, 2 * u + 1);
      for (int slot = 0; slot < off.n_gamma; ++slot)
        grad[off.gamma_begin + slot] = parts.gamma[u][slot];
      grad[off.theta] = parts.resid(u, u);
    }
    if (index_.cross_begin >= 0) {
      grad[index_.cross_begin + 0] = 2.0 * parts.psi(0, 2);
      grad[index_.cross_begin + 1] = 2.0 * parts.psi(0, 3);
      grad[index_.cross_begin + 2] = 2.0 * parts.psi(1, 2);
      grad[index_.cross_begin + 3] = 2.0 * parts.psi(1, 3);
      grad[index_.cross_begin + 4] = 2.0 * parts.resid(0, 1);
    }
    return grad;
  }

 private:
  static Eigen::MatrixXd repaired_cholesky(Eigen::MatrixXd m) {
    // Square-root factor of a covariance block; off-diagonals are shrunk
    // until the factorization succeeds (jittered restarts can leave a
    // block slightly indefinite).
    const int n = static_cast<int>(m.rows());
    for (int i = 0; i < n; ++i) m(i, i) = std::max(m(i, i), 1e-10);
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::LLT<Eigen::MatrixXd> llt(m);
      if (llt.info() == Eigen::Success) return llt.matrixL();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (i != j) m(i, j) *= 0.7;
    }
    Eigen::MatrixXd diag = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) diag(i, i) = std::sqrt(m(i, i));
    return diag;
  }

  static void pack_cholesky(const Eigen::MatrixXd& l, Eigen::VectorXd& x, int& pos) {
    for (int i = 0; i < l.rows(); ++i)
      for (int j = 0; j <= i; ++j)
        x[pos++] = (i == j) ? std::log(std::max(l(i, i), 1e-150)) : l(i, j);
  }

  static Eigen::MatrixXd unpack_cholesky(const Eigen::VectorXd& x, int& pos, int n) {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j)
        l(i, j) = (i == j) ? std::exp(x[pos++]) : x[pos++];
    return l;
  }

  template <typename LBlock>
  static void pack_cholesky_gradient(const Eigen::MatrixXd& gl, const LBlock& l,
                                     Eigen::VectorXd& gx, int& pos) {
    for (int i = 0; i < gl.rows(); ++i)
      for (int j = 0; j <= i; ++j)
        gx[pos++] = (i == j) ? gl(i, i) * l(i, i) : gl(i, j);
  }

  ParameterSet build(const Eigen::VectorXd& x, Eigen::MatrixXd& l_psi,
                     Eigen::MatrixXd& l_res) const {
    ParameterSet params;
    params.outcomes.resize(m_);
    int pos = 0;
    for (int u = 0; u < m_; ++u) {
      params.outcomes[u].mu_eta0 = x[pos++];
      params.outcomes[u].mu_eta1 = x[pos++];
    }
    if (fix_cross_) {
      l_psi = Eigen::MatrixXd::Zero(4, 4);
      for (int u = 0; u < 2; ++u)
        l_psi.block(2 * u, 2 * u, 2, 2) = unpack_cholesky(x, pos, 2);
    } else {
      l_psi = unpack_cholesky(x, pos, 2 * m_);
    }
    const Eigen::MatrixXd psi = l_psi * l_psi.transpose();
    for (int u = 0; u < m_; ++u) {
      params.outcomes[u].psi00 = psi(2 * u, 2 * u);
      params.outcomes[u].psi01 = psi(2 * u, 2 * u + 1);
      params.outcomes[u].psi11 = psi(2 * u + 1, 2 * u + 1);
    }
    if (m_ == 2 && !fix_cross_) {
      params.cross.psi00 = psi(0, 2);
      params.cross.psi01 = psi(0, 3);
      params.cross.psi10 = psi(1, 2);
      params.cross.psi11 = psi(1, 3);
    }
    for (int u = 0; u < m_; ++u) {
      const GammaLayout& lay = index_.layout[u];
      auto& p = params.outcomes[u];
      p.gamma = Eigen::VectorXd::Constant(static_cast<int>(lay.group.size()), kNaN);
      for (int g = 0; g < lay.n_groups; ++g) {
        const double value = (g == lay.fixed_group) ? 1.0 : x[pos++];
        for (int interval : lay.members[g]) p.gamma[interval] = value;
      }
    }
    if (fix_cross_) {
      l_res = Eigen::MatrixXd::Zero(2, 2);
      for (int u = 0; u < 2; ++u) l_res(u, u) = std::exp(x[pos++]);
    } else {
      l_res = unpack_cholesky(x, pos, m_);
    }
    const Eigen::MatrixXd r = l_res * l_res.transpose();
    for (int u = 0; u < m_; ++u) params.outcomes[u].theta_eps = r(u, u);
    if (m_ == 2 && !fix_cross_) params.cross.theta_eps = r(0, 1);
    return params;
  }

  // Deviance over all individuals; fills `parts` with the analytic
  // gradient accumulators when non-null. Returns +inf (setting
  // `offending`) when an implied covariance is not positive definite.
  double evaluate(const ParameterSet& params, GradientParts* parts,
                  std::string* offending) const {
    const Eigen::MatrixXd psi = params.growth_factor_covariance();
    const Eigen::MatrixXd resid = params.residual_covariance();
    if (parts != nullptr) {
      parts->mean = Eigen::VectorXd::Zero(2 * m_);
      parts->psi = Eigen::MatrixXd::Zero(2 * m_, 2 * m_);
      parts->resid = Eigen::MatrixXd::Zero(m_, m_);
      parts->gamma.resize(m_);
      for (int u = 0; u < m_; ++u)
        parts->gamma[u] = Eigen::VectorXd::Zero(index_.outcome[u].n_gamma);
    }

    Eigen::VectorXd fmean(2 * m_);
    for (int u = 0; u < m_; ++u) {
      fmean[2 * u] = params.outcomes[u].mu_eta0;
      fmean[2 * u + 1] = params.outcomes[u].mu_eta1;
    }

    std::vector<double> contributions;
    contributions.reserve(data_.size());
    for (const auto& d : data_) {
      const int pt = d.p_total;
      Eigen::MatrixXd lambda = Eigen::MatrixXd::Zero(pt, 2 * m_);
      for (int u = 0; u < m_; ++u) {
        const Eigen::MatrixXd& w = d.weights[u];
        const Eigen::VectorXd& gam = params.outcomes[u].gamma;
        for (int r = 0; r < d.p[u]; ++r) {
          double acc = 0.0;
          for (int k = 0; k < w.cols(); ++k) {
            const double wt = w(r, k);
            if (wt != 0.0) acc += gam[k] * wt;
          }
          lambda(d.row_begin[u] + r, 2 * u) = 1.0;
          lambda(d.row_begin[u] + r, 2 * u + 1) = acc;
        }
      }

      Eigen::MatrixXd sigma = lambda * psi * lambda.transpose();
      for (int u = 0; u < m_; ++u)
        for (int r = 0; r < d.p[u]; ++r)
          sigma(d.row_begin[u] + r, d.row_begin[u] + r) += resid(u, u);
      if (m_ == 2)
        for (const auto& [a, b] : d.cross_pairs) {
          sigma(a, b) += resid(0, 1);
          sigma(b, a) += resid(0, 1);
        }

      Eigen::LLT<Eigen::MatrixXd> llt(sigma);
      if (llt.info() != Eigen::Success) {
        if (offending != nullptr) *offending = d.id;
        return std::numeric_limits<double>::infinity();
      }
      const Eigen::VectorXd r_vec = d.x - lambda * fmean;
      const Eigen::VectorXd q = llt.solve(r_vec);
      const Eigen::MatrixXd& lfac = llt.matrixLLT();
      double logdet = 0.0;
      for (int i = 0; i < pt; ++i) logdet += std::log(lfac(i, i));
      logdet *= 2.0;
      const double quad = r_vec.dot(q);
      if (!std::isfinite(logdet) || !std::isfinite(quad)) {
        if (offending != nullptr) *offending = d.id;
        return std::numeric_limits<double>::infinity();
      }
      contributions.push_back(pt * kLog2Pi + logdet + quad);

      if (parts != nullptr) {
        const Eigen::MatrixXd sinv =
            llt.solve(Eigen::MatrixXd::Identity(pt, pt));
        const Eigen::MatrixXd a = sinv - q * q.transpose();
        parts->mean.noalias() -= 2.0 * lambda.transpose() * q;
        parts->psi.noalias() += lambda.transpose() * a * lambda;
        for (int u = 0; u < m_; ++u) {
          double tr = 0.0;
          for (int r = 0; r < d.p[u]; ++r)
            tr += a(d.row_begin[u] + r, d.row_begin[u] + r);
          parts->resid(u, u) += tr;
        }
        if (m_ == 2) {
          double cr = 0.0;
          for (const auto& [i, j] : d.cross_pairs) cr += a(i, j);
          parts->resid(0, 1) += cr;
          parts->resid(1, 0) += cr;
        }
        // d Sigma / d gamma_g = dLambda Psi Lambda' + transpose, with
        // dLambda supported on the shape column of outcome u.
        const Eigen::MatrixXd alp = a * lambda * psi;
        for (int u = 0; u < m_; ++u) {
          const GammaLayout& lay = index_.layout[u];
          const Eigen::MatrixXd& w = d.weights[u];
          const double mu1 = params.outcomes[u].mu_eta1;
          int slot = 0;
          for (int g = 0; g < lay.n_groups; ++g) {
            if (g == lay.fixed_group) continue;
            double t_cov = 0.0, t_mean = 0.0;
            for (int r = 0; r < d.p[u]; ++r) {
              double wg = 0.0;
              for (int interval : lay.members[g]) wg += w(r, interval);
              if (wg == 0.0) continue;
              t_cov += wg * alp(d.row_begin[u] + r, 2 * u + 1);
              t_mean += wg * q[d.row_begin[u] + r];
            }
            parts->gamma[u][slot] += 2.0 * t_cov - 2.0 * mu1 * t_mean;
            ++slot;
          }
        }
      }
    }
    return exact_total(std::move(contributions));
  }

  ModelSpec spec_;
  bool fix_cross_;
  ParameterIndex index_;
  int m_;
  std::vector<IndividualData> data_;
};

void check_spec_against_sample(const ModelSpec& spec, const LongitudinalSample& sample) {
  spec.check();
  for (const auto& o : spec.outcomes) {
    const int idx = sample.outcome_index(o.label);
    if (idx < 0)
      throw std::invalid_argument("outcome '" + o.label + "' not present in data");
    const auto observed = sample.observed_waves_anywhere(idx);
    if (!observed.empty() && observed.back() > o.waves)
      throw std::invalid_argument("outcome '" + o.label + "': data contain wave " +
                                  std::to_string(observed.back()) +
                                  " beyond declared J=" + std::to_string(o.waves));
  }
}

Eigen::VectorXd step_sizes(const Eigen::VectorXd& theta) {
  Eigen::VectorXd h(theta.size());
  for (int k = 0; k < theta.size(); ++k)
    h[k] = std::max(1e-5, 1e-5 * std::abs(theta[k]));
  return h;
}

}  // namespace

double fiml_deviance(const ParameterSet& params, const ModelSpec& spec,
                     const LongitudinalSample& sample) {
  check_spec_against_sample(spec, sample);
  FimlContext ctx(sample, spec, false);
  std::string offending;
  const double dev = ctx.deviance(params, &offending);
  if (!std::isfinite(dev))
    throw std::runtime_error("implied covariance not positive definite for individual '" +
                             offending + "'");
  return dev;
}

Eigen::VectorXd fiml_deviance_gradient(const ParameterSet& params, const ModelSpec& spec,
                                       const LongitudinalSample& sample) {
  check_spec_against_sample(spec, sample);
  FimlContext ctx(sample, spec, false);
  Eigen::VectorXd grad;
  std::string offending;
  const double dev = ctx.deviance_gradient(params, grad, &offending);
  if (!std::isfinite(dev))
    throw std::runtime_error("implied covariance not positive definite for individual '" +
                             offending + "'");
  return grad;
}

Eigen::VectorXd numeric_gradient(const ParameterSet& params, const ModelSpec& spec,
                                 const LongitudinalSample& sample) {
  check_spec_against_sample(spec, sample);
  FimlContext ctx(sample, spec, false);
  const Eigen::VectorXd theta = pack_parameters(ctx.index(), params);
  const Eigen::VectorXd h = step_sizes(theta);
  Eigen::VectorXd grad(theta.size());
  for (int k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp[k] += h[k];
    tm[k] -= h[k];
    const double fp = ctx.deviance(unpack_parameters(ctx.index(), tp));
    const double fm = ctx.deviance(unpack_parameters(ctx.index(), tm));
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("non-finite deviance at a stencil point (parameter " +
                               ctx.index().names[k] + ")");
    grad[k] = (fp - fm) / (2.0 * h[k]);
  }
  return grad;
}

namespace {

Eigen::MatrixXd hessian_impl(const FimlContext& ctx, const Eigen::VectorXd& theta) {
  const Eigen::VectorXd h = step_sizes(theta);
  const int n = static_cast<int>(theta.size());
  Eigen::MatrixXd hess(n, n);
  Eigen::VectorXd gp, gm;
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp[k] += h[k];
    tm[k] -= h[k];
    const double fp = ctx.deviance_gradient(unpack_parameters(ctx.index(), tp), gp);
    const double fm = ctx.deviance_gradient(unpack_parameters(ctx.index(), tm), gm);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("non-finite deviance at a stencil point (parameter " +
                               ctx.index().names[k] + ")");
    hess.col(k) = (gp - gm) / (2.0 * h[k]);
  }
  return 0.5 * (hess + hess.transpose());
}

}  // namespace

Eigen::MatrixXd numeric_hessian(const ParameterSet& params, const ModelSpec& spec,
                                const LongitudinalSample& sample) {
  check_spec_against_sample(spec, sample);
  FimlContext ctx(sample, spec, false);
  return hessian_impl(ctx, pack_parameters(ctx.index(), params));
}

ParameterSet starting_values(const LongitudinalSample& sample, const ModelSpec& spec) {
  check_spec_against_sample(spec, sample);
  const int m = static_cast<int>(spec.outcomes.size());
  ParameterSet params;
  params.outcomes.resize(m);
  std::vector<std::vector<double>> baselines(m);

  for (int u = 0; u < m; ++u) {
    const auto& ospec = spec.outcomes[u];
    const GammaLayout lay = gamma_layout(sample, ospec);
    auto& p = params.outcomes[u];

    for (const auto& ind : sample.individuals) {
      const OutcomeSeries* s = ind.series_for(ospec.label);
      if (s != nullptr && !s->observations.empty())
        baselines[u].push_back(s->observations.front().value);
    }
    if (baselines[u].empty())
      throw std::invalid_argument("outcome '" + ospec.label + "' has no observations");
    const auto mean_var = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      if (v.size() > 1) {
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size() - 1);
      }
      return std::make_pair(mean, var);
    };
    const auto [b_mean, b_var] = mean_var(baselines[u]);
    p.mu_eta0 = b_mean;
    p.psi00 = std::max(0.5 * b_var, 1e-3);
    p.theta_eps = std::max(0.5 * b_var, 1e-3);
    p.psi01 = 0.0;

    // Mean per-unit-time change over each identified interval group,
    // from individuals observing both endpoints of the group's span.
    std::vector<double> group_rate(lay.n_groups, 0.0);
    std::vector<std::vector<double>> rates(lay.n_groups);
    for (int g = 0; g < lay.n_groups; ++g) {
      const int wave_left = lay.members[g].front() + 1;
      const int wave_right = lay.members[g].back() + 2;
      for (const auto& ind : sample.individuals) {
        const OutcomeSeries* s = ind.series_for(ospec.label);
        if (s == nullptr) continue;
        const Observation* a = s->at_wave(wave_left);
        const Observation* b = s->at_wave(wave_right);
        if (a != nullptr && b != nullptr && b->time > a->time)
          rates[g].push_back((b->value - a->value) / (b->time - a->time));
      }
      if (!rates[g].empty()) {
        for (double r : rates[g]) group_rate[g] += r;
        group_rate[g] /= static_cast<double>(rates[g].size());
      }
    }
    if (lay.fixed_group < 0 || rates[lay.fixed_group].empty())
      throw std::runtime_error("fixed interval of outcome '" + ospec.label +
                               "' is unobservable: no individual has both endpoints");
    const double fixed_rate = group_rate[lay.fixed_group];
    p.mu_eta1 = fixed_rate;
    const double rate_var = mean_var(rates[lay.fixed_group]).second;
    p.psi11 = rates[lay.fixed_group].size() > 1 ? std::max(rate_var, 1e-2) : 1.0;

    p.gamma = Eigen::VectorXd::Constant(ospec.waves - 1, kNaN);
    for (int g = 0; g < lay.n_groups; ++g) {
      double value = 1.0;
      if (g != lay.fixed_group) {
        value = (fixed_rate != 0.0 && !rates[g].empty()) ? group_rate[g] / fixed_rate : 0.0;
        // Degenerate-rate guard: keep restarts inside a sane range.
        if (!std::isfinite(value) || value == 0.0 || std::abs(value) >= 10.0) value = 0.5;
      }
      for (int interval : lay.members[g]) p.gamma[interval] = value;
    }
  }

  if (m == 2) {
    // Cross-outcome baseline covariance; slope cross terms start at zero.
    const std::size_t n = std::min(baselines[0].size(), baselines[1].size());
    double my = 0.0, mz = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      my += baselines[0][i];
      mz += baselines[1][i];
    }
    my /= static_cast<double>(n);
    mz /= static_cast<double>(n);
    double cov = 0.0;
    if (n > 1) {
      for (std::size_t i = 0; i < n; ++i)
        cov += (baselines[0][i] - my) * (baselines[1][i] - mz);
      cov /= static_cast<double>(n - 1);
    }
    // Keep the starting joint covariance safely positive definite.
    const double bound = 0.9 * std::sqrt(params.outcomes[0].psi00 * params.outcomes[1].psi00);
    params.cross.psi00 = std::clamp(cov, -bound, bound);
    params.cross.psi01 = params.cross.psi10 = params.cross.psi11 = 0.0;
    params.cross.theta_eps = 0.0;
  }
  return params;
}

namespace {

ParameterSet jitter_start(const ParameterIndex& index, const ParameterSet& start,
                          double scale, std::uint64_t seed, int run) {
  std::mt19937_64 eng(seed * 6364136223846793005ULL + 1442695040888963407ULL *
                      static_cast<std::uint64_t>(run) + 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::VectorXd theta = pack_parameters(index, start);
  for (int k = 0; k < theta.size(); ++k) theta[k] *= 1.0 + scale * u(eng);
  return unpack_parameters(index, theta);
}

bool near_singular(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const double max_ev = eig.eigenvalues().maxCoeff();
  return eig.eigenvalues().minCoeff() < kBoundaryRelTol * std::max(1.0, max_ev);
}

}  // namespace

FitResult fit(const LongitudinalSample& sample, const ModelSpec& spec,
              const FitOptions& options) {
  check_spec_against_sample(spec, sample);
  if (const auto violations = validate(sample); !violations.empty())
    throw std::invalid_argument("sample fails validation:\n" + format_violations(violations));

  FimlContext ctx(sample, spec, options.fix_cross_to_zero);
  const ParameterSet start = starting_values(sample, spec);

  LbfgsOptions lopt;
  lopt.max_iterations = options.max_iterations;
  lopt.f_rel_tol = options.deviance_tol;
  lopt.g_scaled_tol = options.gradient_tol;
  const ObjectiveFn objective = [&ctx](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    return ctx.objective(x, g);
  };

  LbfgsResult winner;
  bool have_winner = false;
  LbfgsResult best;
  bool have_best = false;
  int retries_used = 0;

  for (int run = 0; run <= options.max_retries; ++run) {
    const ParameterSet start_r =
        run == 0 ? start
                 : jitter_start(ctx.index(), start, options.jitter_scale,
                                options.rng_seed, run);
    LbfgsResult res = lbfgs_minimize(objective, ctx.to_unconstrained(start_r), lopt);
    if (res.converged) {
      winner = std::move(res);
      have_winner = true;
      retries_used = run;
      break;
    }
    if (std::isfinite(res.f) && (!have_best || res.f < best.f)) {
      best = std::move(res);
      have_best = true;
    }
    retries_used = run;
  }

  FitResult out;
  out.spec = spec;
  out.index = ctx.index();
  out.n_used = sample.n();
  out.retries_used = retries_used;

  const LbfgsResult& sol = have_winner ? winner : best;
  if (!have_winner && !have_best)
    throw std::runtime_error("optimization failed: no finite deviance found from any start");

  out.estimates = ctx.from_unconstrained(sol.x);
  out.natural = pack_parameters(ctx.index(), out.estimates);
  out.deviance = sol.f;
  out.iterations = sol.iterations;
  out.deviance_trace = sol.trace;

  if (!have_winner) {
    out.status = FitStatus::RetriesExhausted;
  } else if (near_singular(out.estimates.growth_factor_covariance()) ||
             near_singular(out.estimates.residual_covariance())) {
    out.status = FitStatus::BoundaryPSD;
  } else {
    out.status = FitStatus::Converged;
  }

  out.se = Eigen::VectorXd::Constant(ctx.index().dim, kNaN);
  if (options.compute_vcov && out.status != FitStatus::RetriesExhausted) {
    try {
      const Eigen::MatrixXd hess = hessian_impl(ctx, out.natural);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess);
      if (eig.eigenvalues().minCoeff() > 0.0) {
        // deviance = -2 log L, so the information matrix is H/2.
        out.vcov = 2.0 * eig.eigenvectors() *
                   eig.eigenvalues().cwiseInverse().asDiagonal() *
                   eig.eigenvectors().transpose();
        for (int k = 0; k < ctx.index().dim; ++k) out.se[k] = std::sqrt(out.vcov(k, k));
      }
    } catch (const std::runtime_error&) {
      // Stencil left the feasible region; standard errors stay flagged.
    }
  }
  return out;
}

std::vector<std::pair<double, double>> wald_ci(const FitResult& fit_result, double level) {
  if (level <= 0.0 || level >= 1.0) throw std::invalid_argument("level must be in (0,1)");
  const double z = normal_quantile(0.5 * (1.0 + level));
  std::vector<std::pair<double, double>> out;
  out.reserve(fit_result.natural.size());
  for (int k = 0; k < fit_result.natural.size(); ++k) {
    const double se = fit_result.se[k];
    if (std::isfinite(se))
      out.emplace_back(fit_result.natural[k] - z * se, fit_result.natural[k] + z * se);
    else
      out.emplace_back(kNaN, kNaN);
  }
  return out;
}

double normal_quantile(double p) {
  boost::math::normal_distribution<double> norm;
  return boost::math::quantile(norm, p);
}

double wald_pvalue(double estimate, double se) {
  if (!std::isfinite(se) || se <= 0.0) return kNaN;
  const double z = std::abs(estimate / se);
  return std::erfc(z / std::numbers::sqrt2);
}

}  // namespace lbgm
