#include "lbgm/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace lbgm {

int ModelSpec::outcome_index(const std::string& label) const {
  for (std::size_t k = 0; k < outcomes.size(); ++k)
    if (outcomes[k].label == label) return static_cast<int>(k);
  return -1;
}

void ModelSpec::check() const {
  if (outcomes.empty() || outcomes.size() > 2)
    throw std::invalid_argument("model spec must declare one or two outcomes");
  for (const auto& o : outcomes) {
    if (o.label.empty()) throw std::invalid_argument("outcome label must be non-empty");
    if (o.waves < 3)
      throw std::invalid_argument("outcome '" + o.label + "': J must be at least 3");
    if (o.fixed_interval < 1 || o.fixed_interval > o.waves - 1)
      throw std::invalid_argument("outcome '" + o.label +
                                  "': fixed_interval must lie in 1..J-1");
  }
  if (outcomes.size() == 2 && outcomes[0].label == outcomes[1].label)
    throw std::invalid_argument("outcome labels must differ");
}

Eigen::MatrixXd ParameterSet::growth_factor_covariance() const {
  const int m = static_cast<int>(outcomes.size());
  Eigen::MatrixXd psi(2 * m, 2 * m);
  for (int u = 0; u < m; ++u) {
    psi(2 * u, 2 * u) = outcomes[u].psi00;
    psi(2 * u, 2 * u + 1) = psi(2 * u + 1, 2 * u) = outcomes[u].psi01;
    psi(2 * u + 1, 2 * u + 1) = outcomes[u].psi11;
  }
  if (m == 2) {
    psi(0, 2) = psi(2, 0) = cross.psi00;
    psi(0, 3) = psi(3, 0) = cross.psi01;
    psi(1, 2) = psi(2, 1) = cross.psi10;
    psi(1, 3) = psi(3, 1) = cross.psi11;
  }
  return psi;
}

Eigen::MatrixXd ParameterSet::residual_covariance() const {
  const int m = static_cast<int>(outcomes.size());
  Eigen::MatrixXd r(m, m);
  for (int u = 0; u < m; ++u) r(u, u) = outcomes[u].theta_eps;
  if (m == 2) r(0, 1) = r(1, 0) = cross.theta_eps;
  return r;
}

LoadingWeights interval_weights(const std::vector<int>& observed_waves,
                                const Eigen::VectorXd& times, int declared_waves,
                                double baseline_time) {
  const int p = static_cast<int>(observed_waves.size());
  if (p == 0 || times.size() != p) throw std::invalid_argument("empty or mismatched times");
  for (int r = 1; r < p; ++r) {
    if (observed_waves[r] <= observed_waves[r - 1])
      throw std::invalid_argument("observed waves must be strictly increasing");
    if (times[r] <= times[r - 1])
      throw std::invalid_argument("times must be strictly increasing");
  }
  if (observed_waves.front() < 1 || observed_waves.back() > declared_waves)
    throw std::invalid_argument("observed waves outside 1..J");

  // Boundary time for every wave between the first and last observed one;
  // skipped waves are placed evenly inside the enclosing observed gap.
  const int w_lo = observed_waves.front();
  const int w_hi = observed_waves.back();
  Eigen::VectorXd boundary(w_hi - w_lo + 1);
  for (int r = 0; r + 1 < p; ++r) {
    const int wa = observed_waves[r];
    const int wb = observed_waves[r + 1];
    boundary[wa - w_lo] = times[r];
    for (int w = wa + 1; w < wb; ++w)
      boundary[w - w_lo] =
          times[r] + (times[r + 1] - times[r]) * double(w - wa) / double(wb - wa);
  }
  boundary[w_hi - w_lo] = times[p - 1];

  LoadingWeights out;
  out.waves = observed_waves;
  out.times = times;
  out.weights = Eigen::MatrixXd::Zero(p, declared_waves - 1);
  for (int r = 0; r < p; ++r) {
    const double upto = times[r];
    for (int w = w_lo; w < observed_waves[r]; ++w) {
      const double lo = std::max(boundary[w - w_lo], baseline_time);
      const double hi = std::min(boundary[w + 1 - w_lo], upto);
      if (hi > lo) out.weights(r, w - 1) = hi - lo;  // interval w spans waves (w, w+1)
    }
  }
  return out;
}

Eigen::VectorXd shape_loadings(const LoadingWeights& w, const Eigen::VectorXd& gammas) {
  const int p = static_cast<int>(w.weights.rows());
  Eigen::VectorXd loadings = Eigen::VectorXd::Zero(p);
  for (int r = 0; r < p; ++r) {
    double acc = 0.0;
    for (int k = 0; k < w.weights.cols(); ++k) {
      const double wt = w.weights(r, k);
      if (wt != 0.0) acc += gammas[k] * wt;
    }
    loadings[r] = acc;
  }
  return loadings;
}

Eigen::MatrixXd build_loading_matrix(const Eigen::VectorXd& times,
                                     const Eigen::VectorXd& gammas,
                                     const std::vector<int>& observed_waves,
                                     double baseline_time) {
  if (times.size() == 0) throw std::invalid_argument("empty times");
  const int j_declared = static_cast<int>(gammas.size()) + 1;
  if (!observed_waves.empty() && observed_waves.back() > j_declared)
    throw std::invalid_argument("gamma vector length does not match declared waves");
  for (int k = 0; k < gammas.size(); ++k)
    if (!std::isfinite(gammas[k])) throw std::invalid_argument("non-finite gamma");

  std::vector<int> waves = observed_waves;
  if (waves.empty()) {
    waves.resize(times.size());
    for (std::size_t k = 0; k < waves.size(); ++k) waves[k] = static_cast<int>(k) + 1;
    if (static_cast<int>(waves.size()) != j_declared)
      throw std::invalid_argument("gamma vector length must be J-1");
  }
  const LoadingWeights w = interval_weights(waves, times, j_declared, baseline_time);
  Eigen::MatrixXd lambda(times.size(), 2);
  lambda.col(0).setOnes();
  lambda.col(1) = shape_loadings(w, gammas);
  return lambda;
}

ImpliedMoments implied_moments(const ModelSpec& spec, const ParameterSet& params,
                               const Individual& individual) {
  spec.check();
  const int m = static_cast<int>(spec.outcomes.size());
  if (static_cast<int>(params.outcomes.size()) != m)
    throw std::invalid_argument("parameter set does not match model spec");

  ImpliedMoments out;
  std::vector<Eigen::VectorXd> shape(m);
  std::vector<const OutcomeSeries*> series(m);
  int total = 0;
  for (int u = 0; u < m; ++u) {
    const OutcomeSeries* s = individual.series_for(spec.outcomes[u].label);
    if (s == nullptr || s->observations.empty())
      throw std::invalid_argument("individual '" + individual.id +
                                  "' has no observations for outcome '" +
                                  spec.outcomes[u].label + "'");
    series[u] = s;
    const int p = static_cast<int>(s->observations.size());
    std::vector<int> waves(p);
    Eigen::VectorXd times(p);
    for (int r = 0; r < p; ++r) {
      waves[r] = s->observations[r].wave;
      times[r] = s->observations[r].time;
    }
    const auto w = interval_weights(waves, times, spec.outcomes[u].waves, times[0]);
    shape[u] = shape_loadings(w, params.outcomes[u].gamma);
    total += p;
  }

  // Stacked loading block: columns (eta0, eta1) per outcome.
  Eigen::MatrixXd lambda = Eigen::MatrixXd::Zero(total, 2 * m);
  Eigen::VectorXd factor_mean(2 * m);
  out.entry_index.reserve(total);
  int row = 0;
  for (int u = 0; u < m; ++u) {
    factor_mean[2 * u] = params.outcomes[u].mu_eta0;
    factor_mean[2 * u + 1] = params.outcomes[u].mu_eta1;
    const int p = static_cast<int>(series[u]->observations.size());
    for (int r = 0; r < p; ++r) {
      lambda(row, 2 * u) = 1.0;
      lambda(row, 2 * u + 1) = shape[u][r];
      out.entry_index.emplace_back(u, series[u]->observations[r].wave);
      ++row;
    }
  }

  out.mean = lambda * factor_mean;
  out.covariance = lambda * params.growth_factor_covariance() * lambda.transpose();
  for (int a = 0; a < total; ++a)  // exact symmetry, not just up to rounding
    for (int b = a + 1; b < total; ++b) out.covariance(a, b) = out.covariance(b, a);
  for (int r = 0; r < total; ++r)
    out.covariance(r, r) += params.outcomes[out.entry_index[r].first].theta_eps;
  if (m == 2) {
    // Residual covariance pairs observations across outcomes by wave index.
    for (int a = 0; a < total; ++a)
      for (int b = a + 1; b < total; ++b)
        if (out.entry_index[a].first != out.entry_index[b].first &&
            out.entry_index[a].second == out.entry_index[b].second) {
          out.covariance(a, b) += params.cross.theta_eps;
          out.covariance(b, a) += params.cross.theta_eps;
        }
  }
  return out;
}

ParameterSet rescale_parameters(const ParameterSet& params, const ModelSpec& from,
                                const ModelSpec& to) {
  from.check();
  to.check();
  if (from.outcomes.size() != to.outcomes.size() ||
      params.outcomes.size() != from.outcomes.size())
    throw std::invalid_argument("rescale: mismatched outcome counts");
  for (std::size_t u = 0; u < from.outcomes.size(); ++u)
    if (from.outcomes[u].label != to.outcomes[u].label ||
        from.outcomes[u].waves != to.outcomes[u].waves)
      throw std::invalid_argument("rescale: specs may differ only in fixed intervals");

  ParameterSet out = params;
  std::vector<double> scale(params.outcomes.size(), 1.0);
  for (std::size_t u = 0; u < params.outcomes.size(); ++u) {
    const int k_new = to.outcomes[u].fixed_interval - 1;
    const Eigen::VectorXd& g = params.outcomes[u].gamma;
    if (k_new >= g.size()) throw std::invalid_argument("rescale: fixed interval out of range");
    const double c = g[k_new];
    if (!std::isfinite(c) || c == 0.0)
      throw std::invalid_argument("rescale: rate of the new fixed interval is zero or undefined");
    scale[u] = c;
    out.outcomes[u].mu_eta1 = params.outcomes[u].mu_eta1 * c;
    out.outcomes[u].psi01 = params.outcomes[u].psi01 * c;
    out.outcomes[u].psi11 = params.outcomes[u].psi11 * c * c;
    out.outcomes[u].gamma = g / c;
    out.outcomes[u].gamma[k_new] = 1.0;  // exact, not up to rounding
  }
  if (params.parallel()) {
    out.cross.psi01 = params.cross.psi01 * scale[1];
    out.cross.psi10 = params.cross.psi10 * scale[0];
    out.cross.psi11 = params.cross.psi11 * scale[0] * scale[1];
  }
  return out;
}

namespace {

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  if (!j.contains("outcomes") || !j["outcomes"].is_array())
    throw std::invalid_argument("model spec: missing 'outcomes' array");
  for (const auto& o : j["outcomes"]) {
    OutcomeModelSpec os;
    os.label = o.at("label").get<std::string>();
    os.waves = o.at("J").get<int>();
    os.fixed_interval = o.value("fixed_interval", 1);
    spec.outcomes.push_back(std::move(os));
  }
  spec.check();
  return spec;
}

}  // namespace

ModelSpec model_spec_from_json_text(const std::string& text) {
  return model_spec_from_json(nlohmann::json::parse(text));
}

std::string model_spec_to_json_text(const ModelSpec& spec) {
  nlohmann::json j;
  j["outcomes"] = nlohmann::json::array();
  for (const auto& o : spec.outcomes)
    j["outcomes"].push_back(
        {{"label", o.label}, {"J", o.waves}, {"fixed_interval", o.fixed_interval}});
  return j.dump(2);
}

ModelSpec read_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return model_spec_from_json_text(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed model spec " + path + ": " + e.what());
  }
}

void write_model_spec(const ModelSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model spec: " + path);
  out << model_spec_to_json_text(spec) << "\n";
}

}  // namespace lbgm
