#include "lbgm/simstudy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace lbgm {

namespace {
const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

// Square-root factor of a PSD matrix via its eigendecomposition; small
// negative eigenvalues are clamped so zero-variance designs work.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const double max_ev = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd ev = eig.eigenvalues();
  for (int k = 0; k < ev.size(); ++k) {
    if (ev[k] < -1e-9 * max_ev)
      throw std::invalid_argument(std::string(what) + " is not positive semi-definite");
    ev[k] = std::max(ev[k], 0.0);
  }
  return eig.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

}  // namespace

void SimulationDesign::check() const {
  if (n < 1) throw std::invalid_argument("design: n must be positive");
  const int j = static_cast<int>(wave_times.size());
  if (j < 3) throw std::invalid_argument("design: at least 3 waves required");
  double min_gap = std::numeric_limits<double>::infinity();
  for (int k = 1; k < j; ++k) {
    if (wave_times[k] <= wave_times[k - 1])
      throw std::invalid_argument("design: wave times must be strictly increasing");
    min_gap = std::min(min_gap, wave_times[k] - wave_times[k - 1]);
  }
  if (delta < 0.0 || 2.0 * delta >= min_gap)
    throw std::invalid_argument("design: time windows must not overlap (2*delta < min gap)");
  if (outcomes.empty() || outcomes.size() > 2)
    throw std::invalid_argument("design: one or two outcomes required");
  if (outcomes.size() == 2 && outcomes[0].label == outcomes[1].label)
    throw std::invalid_argument("design: outcome labels must differ");
  if (std::abs(rho_between) > 1.0 || std::abs(rho_resid) > 1.0)
    throw std::invalid_argument("design: correlations must lie in [-1, 1]");

  for (const auto& o : outcomes) {
    if (o.gammas.size() != j - 1)
      throw std::invalid_argument("design: outcome '" + o.label +
                                  "' needs J-1 relative rates");
    if (o.fixed_interval < 1 || o.fixed_interval > j - 1)
      throw std::invalid_argument("design: fixed interval out of range");
    if (o.gammas[o.fixed_interval - 1] != 1.0)
      throw std::invalid_argument("design: the fixed interval's relative rate must be 1");
    if (std::abs(o.rho_within) > 1.0)
      throw std::invalid_argument("design: correlations must lie in [-1, 1]");
    if (o.psi00 < 0.0 || o.psi11 < 0.0 || o.theta_eps < 0.0)
      throw std::invalid_argument("design: variances must be nonnegative");
    std::set<int> missing(o.missing_waves.begin(), o.missing_waves.end());
    for (int w : missing)
      if (w < 1 || w > j) throw std::invalid_argument("design: missing wave out of range");
    if (j - static_cast<int>(missing.size()) < 3)
      throw std::invalid_argument("design: outcome '" + o.label +
                                  "' keeps fewer than 3 waves");
  }
  psd_factor(true_parameters().growth_factor_covariance(), "growth-factor covariance");
}

ModelSpec SimulationDesign::model_spec() const {
  ModelSpec spec;
  for (const auto& o : outcomes)
    spec.outcomes.push_back(
        {o.label, static_cast<int>(wave_times.size()), o.fixed_interval});
  return spec;
}

ParameterSet SimulationDesign::true_parameters() const {
  ParameterSet params;
  for (const auto& o : outcomes) {
    OutcomeParameters p;
    p.mu_eta0 = o.mu_eta0;
    p.mu_eta1 = o.mu_eta1;
    p.psi00 = o.psi00;
    p.psi11 = o.psi11;
    p.psi01 = o.rho_within * std::sqrt(o.psi00 * o.psi11);
    p.theta_eps = o.theta_eps;
    p.gamma = o.gammas;
    params.outcomes.push_back(std::move(p));
  }
  if (outcomes.size() == 2) {
    const auto& y = outcomes[0];
    const auto& z = outcomes[1];
    params.cross.psi00 = rho_between * std::sqrt(y.psi00 * z.psi00);
    params.cross.psi01 = rho_between * std::sqrt(y.psi00 * z.psi11);
    params.cross.psi10 = rho_between * std::sqrt(y.psi11 * z.psi00);
    params.cross.psi11 = rho_between * std::sqrt(y.psi11 * z.psi11);
    params.cross.theta_eps = rho_resid * std::sqrt(y.theta_eps * z.theta_eps);
  }
  return params;
}

GeneratedData generate_dataset(const SimulationDesign& design, std::mt19937_64& rng) {
  design.check();
  const int j = static_cast<int>(design.wave_times.size());
  const int m = static_cast<int>(design.outcomes.size());
  const ParameterSet truth = design.true_parameters();
  const Eigen::MatrixXd factor_gf =
      psd_factor(truth.growth_factor_covariance(), "growth-factor covariance");
  const Eigen::MatrixXd factor_res =
      psd_factor(truth.residual_covariance(), "residual covariance");

  std::vector<std::set<int>> masked(m);
  for (int u = 0; u < m; ++u)
    masked[u] = {design.outcomes[u].missing_waves.begin(),
                 design.outcomes[u].missing_waves.end()};

  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> window(-design.delta, design.delta);

  GeneratedData out;
  out.truth = truth;
  for (const auto& o : design.outcomes) out.sample.outcome_labels.push_back(o.label);
  out.sample.individuals.reserve(design.n);

  Eigen::VectorXd z_gf(2 * m), eta(2 * m), z_res(m), eps(m), times(j);
  for (int i = 0; i < design.n; ++i) {
    for (int k = 0; k < 2 * m; ++k) z_gf[k] = normal(rng);
    eta = factor_gf * z_gf;
    for (int u = 0; u < m; ++u) {
      eta[2 * u] += design.outcomes[u].mu_eta0;
      eta[2 * u + 1] += design.outcomes[u].mu_eta1;
    }
    for (int w = 0; w < j; ++w)
      times[w] = design.wave_times[w] + (design.delta > 0.0 ? window(rng) : 0.0);

    Individual ind;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "i%06d", i + 1);
    ind.id = buf;
    ind.series.resize(m);
    for (int u = 0; u < m; ++u) {
      ind.series[u].outcome_label = design.outcomes[u].label;
      ind.series[u].waves = j;
    }

    double loading_prev[2] = {0.0, 0.0};
    for (int w = 0; w < j; ++w) {
      for (int u = 0; u < m; ++u) z_res[u] = normal(rng);
      eps = factor_res * z_res;
      for (int u = 0; u < m; ++u) {
        const double loading =
            w == 0 ? 0.0
                   : loading_prev[u] +
                         design.outcomes[u].gammas[w - 1] * (times[w] - times[w - 1]);
        loading_prev[u] = loading;
        if (masked[u].count(w + 1) > 0) continue;
        const double value = eta[2 * u] + eta[2 * u + 1] * loading + eps[u];
        ind.series[u].observations.push_back({w + 1, times[w], value});
      }
    }
    out.sample.individuals.push_back(std::move(ind));
  }
  return out;
}

ParameterIndex study_parameter_index(const SimulationDesign& design) {
  const ModelSpec spec = design.model_spec();
  const int j = static_cast<int>(design.wave_times.size());
  std::vector<GammaLayout> layouts;
  for (std::size_t u = 0; u < design.outcomes.size(); ++u) {
    const std::set<int> masked(design.outcomes[u].missing_waves.begin(),
                               design.outcomes[u].missing_waves.end());
    std::vector<int> observed;
    for (int w = 1; w <= j; ++w)
      if (masked.count(w) == 0) observed.push_back(w);
    layouts.push_back(gamma_layout_from_waves(observed, spec.outcomes[u]));
  }
  return build_parameter_index(std::move(layouts), spec, false);
}

Eigen::VectorXd true_parameter_vector(const SimulationDesign& design,
                                      const ParameterIndex& index) {
  Eigen::VectorXd truth(index.dim);
  const ParameterSet pop = design.true_parameters();
  std::vector<double> fixed_avg(design.outcomes.size(), 1.0);

  for (std::size_t u = 0; u < design.outcomes.size(); ++u) {
    const auto& off = index.outcome[u];
    const auto& o = design.outcomes[u];
    const GammaLayout& lay = index.layout[u];

    // Length-weighted average design rate over an identified tie group.
    auto group_avg = [&](int g) {
      double num = 0.0, den = 0.0;
      for (int k : lay.members[g]) {
        const double len = design.wave_times[k + 1] - design.wave_times[k];
        num += o.gammas[k] * len;
        den += len;
      }
      return num / den;
    };
    const double f = group_avg(lay.fixed_group);
    fixed_avg[u] = f;

    truth[off.mu0] = pop.outcomes[u].mu_eta0;
    truth[off.mu1] = pop.outcomes[u].mu_eta1 * f;
    truth[off.psi00] = pop.outcomes[u].psi00;
    truth[off.psi01] = pop.outcomes[u].psi01 * f;
    truth[off.psi11] = pop.outcomes[u].psi11 * f * f;
    truth[off.theta] = pop.outcomes[u].theta_eps;
    int slot = off.gamma_begin;
    for (int g = 0; g < lay.n_groups; ++g) {
      if (g == lay.fixed_group) continue;
      truth[slot++] = group_avg(g) / f;
    }
  }
  if (index.cross_begin >= 0) {
    truth[index.cross_begin + 0] = pop.cross.psi00;
    truth[index.cross_begin + 1] = pop.cross.psi01 * fixed_avg[1];
    truth[index.cross_begin + 2] = pop.cross.psi10 * fixed_avg[0];
    truth[index.cross_begin + 3] = pop.cross.psi11 * fixed_avg[0] * fixed_avg[1];
    truth[index.cross_begin + 4] = pop.cross.theta_eps;
  }
  return truth;
}

double relative_bias(const std::vector<double>& estimates, double truth) {
  if (estimates.empty()) return kNaN;
  bool constant = true;
  for (double e : estimates) constant = constant && e == estimates.front();
  double mean = estimates.front();
  if (!constant) {
    mean = 0.0;
    for (double e : estimates) mean += e;
    mean /= static_cast<double>(estimates.size());
  }
  const double bias = mean - truth;
  return truth != 0.0 ? bias / truth : bias;
}

double empirical_se(const std::vector<double>& estimates) {
  const std::size_t s = estimates.size();
  if (s < 2) return kNaN;
  bool constant = true;
  for (double e : estimates) constant = constant && e == estimates.front();
  if (constant) return 0.0;
  double mean = 0.0;
  for (double e : estimates) mean += e;
  mean /= static_cast<double>(s);
  double ss = 0.0;
  for (double e : estimates) ss += (e - mean) * (e - mean);
  return std::sqrt(ss / static_cast<double>(s - 1));
}

double relative_rmse(const std::vector<double>& estimates, double truth) {
  if (estimates.empty()) return kNaN;
  double ss = 0.0;
  for (double e : estimates) ss += (e - truth) * (e - truth);
  const double rmse = std::sqrt(ss / static_cast<double>(estimates.size()));
  return truth != 0.0 ? rmse / truth : rmse;
}

double coverage(const std::vector<std::pair<double, double>>& intervals, double truth) {
  if (intervals.empty()) return kNaN;
  std::size_t hits = 0;
  for (const auto& [lo, hi] : intervals)
    if (lo <= truth && truth <= hi) ++hits;
  return static_cast<double>(hits) / static_cast<double>(intervals.size());
}

StudyResult run_study(const SimulationDesign& design, int s, std::uint64_t seed,
                      const StudyOptions& options) {
  design.check();
  if (s < 1) throw std::invalid_argument("replication count must be positive");

  const ModelSpec spec = design.model_spec();
  const ParameterIndex index = study_parameter_index(design);
  const Eigen::VectorXd truth = true_parameter_vector(design, index);
  const FitFunction fitter =
      options.fit_fn ? options.fit_fn
                     : [](const LongitudinalSample& smp, const ModelSpec& sp,
                          const FitOptions& fo) { return fit(smp, sp, fo); };

  const int cap = 3 * s;
  std::vector<ReplicationRecord> records;
  records.reserve(static_cast<std::size_t>(s));

  auto run_attempt = [&](int attempt) {
    ReplicationRecord rec;
    rec.attempt = attempt;
    try {
      std::seed_seq sq{static_cast<std::uint32_t>(seed),
                       static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(attempt), 0x5eedu};
      std::mt19937_64 rng(sq);
      GeneratedData gen = generate_dataset(design, rng);
      FitOptions fo = options.fit;
      fo.rng_seed = mix_seed(seed, static_cast<std::uint64_t>(attempt));
      const FitResult fr = fitter(gen.sample, spec, fo);
      rec.fit_retries = fr.retries_used;
      if (fr.status == FitStatus::Converged && fr.natural.size() == index.dim) {
        rec.converged = true;
        rec.estimates = fr.natural;
        rec.se = fr.se;
        const auto cis = wald_ci(fr, options.ci_level);
        rec.ci_low.resize(index.dim);
        rec.ci_high.resize(index.dim);
        for (int k = 0; k < index.dim; ++k) {
          rec.ci_low[k] = cis[k].first;
          rec.ci_high[k] = cis[k].second;
        }
      }
    } catch (const std::exception&) {
      rec.converged = false;  // counted as a failed attempt
    }
    return rec;
  };

  int n_threads = options.n_threads > 0
                      ? options.n_threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, n_threads);

  int evaluated = 0;
  int successes = 0;
  while (successes < s && evaluated < cap) {
    const int chunk = std::min(s - successes, cap - evaluated);
    std::vector<ReplicationRecord> chunk_records(chunk);
    if (n_threads == 1 || chunk == 1) {
      for (int a = 0; a < chunk; ++a) chunk_records[a] = run_attempt(evaluated + a);
    } else {
      std::atomic<int> next{0};
      auto worker = [&]() {
        for (int a = next.fetch_add(1); a < chunk; a = next.fetch_add(1))
          chunk_records[a] = run_attempt(evaluated + a);
      };
      std::vector<std::thread> pool;
      for (int t = 0; t < std::min(n_threads, chunk); ++t) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
    for (auto& rec : chunk_records) {
      records.push_back(std::move(rec));
      if (records.back().converged) ++successes;
    }
    evaluated += chunk;
  }

  // Keep attempts up to and including the s-th success; anything past it
  // in the final chunk is discarded so serial and concurrent runs of the
  // same seed agree exactly.
  StudyResult out;
  std::size_t cutoff = records.size();
  if (successes >= s) {
    int seen = 0;
    for (std::size_t k = 0; k < records.size(); ++k) {
      if (records[k].converged && ++seen == s) {
        cutoff = k + 1;
        break;
      }
    }
  }
  records.resize(cutoff);

  MetricReport& rep = out.metrics;
  rep.parameter_names = index.names;
  rep.truth = truth;
  rep.attempted = static_cast<int>(records.size());
  int kept_successes = 0;
  for (const auto& rec : records) {
    rep.total_fit_retries += rec.fit_retries;
    if (rec.converged) ++kept_successes;
  }
  rep.replications = kept_successes;
  rep.capped = kept_successes < s;
  rep.convergence_rate =
      rep.attempted > 0 ? static_cast<double>(kept_successes) / rep.attempted : 0.0;

  rep.relative_bias = Eigen::VectorXd::Constant(index.dim, kNaN);
  rep.empirical_se = Eigen::VectorXd::Constant(index.dim, kNaN);
  rep.relative_rmse = Eigen::VectorXd::Constant(index.dim, kNaN);
  rep.coverage = Eigen::VectorXd::Constant(index.dim, kNaN);
  rep.absolute_scale.assign(index.dim, false);
  if (kept_successes > 0) {
    for (int k = 0; k < index.dim; ++k) {
      std::vector<double> est;
      std::vector<std::pair<double, double>> cis;
      est.reserve(kept_successes);
      cis.reserve(kept_successes);
      for (const auto& rec : records) {
        if (!rec.converged) continue;
        est.push_back(rec.estimates[k]);
        cis.emplace_back(rec.ci_low[k], rec.ci_high[k]);
      }
      rep.absolute_scale[k] = truth[k] == 0.0;
      rep.relative_bias[k] = relative_bias(est, truth[k]);
      rep.empirical_se[k] = empirical_se(est);
      rep.relative_rmse[k] = relative_rmse(est, truth[k]);
      rep.coverage[k] = coverage(cis, truth[k]);
    }
  }
  out.replications = std::move(records);
  return out;
}

namespace {

SimulationDesign design_from_json(const nlohmann::json& j) {
  SimulationDesign d;
  d.n = j.at("n").get<int>();
  const auto& wt = j.at("wave_times");
  d.wave_times.resize(wt.size());
  for (std::size_t k = 0; k < wt.size(); ++k) d.wave_times[k] = wt[k].get<double>();
  d.delta = j.value("delta", 0.0);
  d.rho_between = j.value("rho_between", 0.0);
  d.rho_resid = j.value("rho_resid", 0.0);
  for (const auto& jo : j.at("outcomes")) {
    OutcomeDesign o;
    o.label = jo.at("label").get<std::string>();
    o.mu_eta0 = jo.at("mu_eta0").get<double>();
    o.psi00 = jo.at("psi00").get<double>();
    o.mu_eta1 = jo.at("mu_eta1").get<double>();
    o.psi11 = jo.at("psi11").get<double>();
    o.rho_within = jo.value("rho_within", 0.0);
    o.theta_eps = jo.at("theta_eps").get<double>();
    const auto& g = jo.at("gammas");
    o.gammas.resize(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) o.gammas[k] = g[k].get<double>();
    o.fixed_interval = jo.value("fixed_interval", 1);
    if (jo.contains("missing_waves"))
      for (const auto& w : jo["missing_waves"]) o.missing_waves.push_back(w.get<int>());
    d.outcomes.push_back(std::move(o));
  }
  d.check();
  return d;
}

}  // namespace

SimulationDesign design_from_json_text(const std::string& text) {
  return design_from_json(nlohmann::json::parse(text));
}

std::string design_to_json_text(const SimulationDesign& design) {
  nlohmann::json j;
  j["n"] = design.n;
  j["wave_times"] =
      std::vector<double>(design.wave_times.begin(), design.wave_times.end());
  j["delta"] = design.delta;
  j["rho_between"] = design.rho_between;
  j["rho_resid"] = design.rho_resid;
  j["outcomes"] = nlohmann::json::array();
  for (const auto& o : design.outcomes) {
    nlohmann::json jo;
    jo["label"] = o.label;
    jo["mu_eta0"] = o.mu_eta0;
    jo["psi00"] = o.psi00;
    jo["mu_eta1"] = o.mu_eta1;
    jo["psi11"] = o.psi11;
    jo["rho_within"] = o.rho_within;
    jo["theta_eps"] = o.theta_eps;
    jo["gammas"] = std::vector<double>(o.gammas.begin(), o.gammas.end());
    jo["fixed_interval"] = o.fixed_interval;
    jo["missing_waves"] = o.missing_waves;
    j["outcomes"].push_back(std::move(jo));
  }
  return j.dump(2);
}

SimulationDesign read_design(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open design file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return design_from_json_text(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed design file " + path + ": " + e.what());
  }
}

void write_design(const SimulationDesign& design, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write design file: " + path);
  out << design_to_json_text(design) << "\n";
}

}  // namespace lbgm
