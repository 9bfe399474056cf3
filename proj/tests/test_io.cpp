#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "lbgm/io.hpp"

using namespace lbgm;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string first_line(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

std::string read_all(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One fitted bivariate dataset shared by the io tests.
struct FittedFixture {
  SimulationDesign design;
  GeneratedData gen;
  FitResult fit_result;
  DerivedReport derived;

  FittedFixture() {
    design.n = 120;
    design.wave_times.resize(4);
    for (int w = 0; w < 4; ++w) design.wave_times[w] = w;
    design.delta = 0.25;
    design.rho_between = 0.3;
    design.rho_resid = 0.3;
    for (const char* label : {"y", "z"}) {
      OutcomeDesign o;
      o.label = label;
      o.mu_eta0 = label[0] == 'y' ? 50.0 : 30.0;
      o.psi00 = 25;
      o.mu_eta1 = label[0] == 'y' ? 4.0 : 5.0;
      o.psi11 = 1;
      o.rho_within = 0.3;
      o.theta_eps = 1;
      o.gammas.resize(3);
      o.gammas << 1.0, 0.7, 0.4;
      o.fixed_interval = 1;
      design.outcomes.push_back(std::move(o));
    }
    std::mt19937_64 rng(42);
    gen = generate_dataset(design, rng);
    FitOptions options;
    options.rng_seed = 7;
    fit_result = fit(gen.sample, design.model_spec(), options);
    derived = build_derived_report(fit_result, gen.sample);
  }
};

const FittedFixture& fixture() {
  static const FittedFixture f;
  return f;
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("parameter table round trip with the pinned header") {
  const auto& f = fixture();
  REQUIRE(f.fit_result.status == FitStatus::Converged);
  const std::string path = temp_path("lbgm_params.csv");
  write_parameter_table(path, f.fit_result, 0.95);
  CHECK(first_line(path) == "parameter,estimate,se,ci_low,ci_high,pvalue");

  const auto rows = read_parameter_table(path);
  REQUIRE(static_cast<int>(rows.size()) == f.fit_result.index.dim);
  const auto cis = wald_ci(f.fit_result, 0.95);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].name == f.fit_result.index.names[k]);
    CHECK(rows[k].estimate == f.fit_result.natural[k]);  // full-precision round trip
    CHECK(rows[k].se == f.fit_result.se[k]);
    CHECK(rows[k].ci_low == cis[k].first);
    CHECK(rows[k].ci_high == cis[k].second);
  }
}

TEST_CASE("derived report round trip") {
  const auto& f = fixture();
  const std::string path = temp_path("lbgm_derived.csv");
  write_derived_report(path, f.derived);
  CHECK(first_line(path) ==
        "panel,quantity,y_estimate,y_se,y_pvalue,z_estimate,z_se,z_pvalue,"
        "cov_estimate,cov_se,cov_pvalue");

  const auto rows = read_derived_report(path);
  REQUIRE(!rows.empty());
  int n_mean_rates = 0;
  for (const auto& row : rows) {
    if (row.panel == "mean" && row.quantity.rfind("rate_interval_", 0) == 0) {
      ++n_mean_rates;
      CHECK(row.est[0].has_value());
      CHECK(row.est[1].has_value());
    }
    if (row.panel == "correlation" && row.quantity == "rate")
      CHECK(row.est[2] == doctest::Approx(f.derived.rate_corr.estimate));
  }
  CHECK(n_mean_rates == 3);
}

TEST_CASE("metric report uses the pinned column layout") {
  MetricReport rep;
  rep.parameter_names = {"mu_eta0[y]", "psi01[yz]"};
  rep.truth = Eigen::Vector2d(50.0, 0.0);
  rep.relative_bias = Eigen::Vector2d(0.001, 0.02);
  rep.empirical_se = Eigen::Vector2d(0.6, 0.1);
  rep.relative_rmse = Eigen::Vector2d(0.012, 0.1);
  rep.coverage = Eigen::Vector2d(0.95, 0.94);
  rep.absolute_scale = {false, true};

  const std::string path = temp_path("lbgm_metrics.csv");
  write_metric_report(path, rep);
  CHECK(first_line(path) ==
        "parameter,truth,relative_bias,empirical_se,relative_rmse,coverage");
  const std::string all = read_all(path);
  CHECK(all.find("mu_eta0[y],50,0.001") != std::string::npos);
}

TEST_CASE("trajectory file lists implied means and observed points") {
  const auto& f = fixture();
  const std::string path = temp_path("lbgm_traj.csv");
  write_trajectory(path, f.gen.sample, f.fit_result);
  CHECK(first_line(path) == "series,id,outcome,wave,time,value");

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  int implied = 0, observed = 0;
  while (std::getline(in, line)) {
    if (line.rfind("implied,", 0) == 0) ++implied;
    if (line.rfind("observed,", 0) == 0) ++observed;
  }
  CHECK(implied == 8);            // 4 waves x 2 outcomes
  CHECK(observed == 120 * 4 * 2);
}

TEST_CASE("text report renders the two-panel layout with stars") {
  const auto& f = fixture();
  const std::string param_path = temp_path("lbgm_params2.csv");
  const std::string derived_path = temp_path("lbgm_derived2.csv");
  write_parameter_table(param_path, f.fit_result, 0.95);
  write_derived_report(derived_path, f.derived);

  const auto text = render_text_report(read_parameter_table(param_path),
                                       read_derived_report(derived_path));
  CHECK(text.find("Mean") != std::string::npos);
  CHECK(text.find("Variance") != std::string::npos);
  CHECK(text.find("initial status") != std::string::npos);
  CHECK(text.find("rate_interval_1") != std::string::npos);
  CHECK(text.find("corr(rate)") != std::string::npos);
  CHECK(text.find("*") != std::string::npos);  // significant at 0.05 somewhere
}

TEST_CASE("unavailable standard errors render as unavailable, not as zeros") {
  const auto& f = fixture();
  FitResult crippled = f.fit_result;
  crippled.vcov.resize(0, 0);
  crippled.se = Eigen::VectorXd::Constant(crippled.index.dim,
                                          std::numeric_limits<double>::quiet_NaN());
  const std::string param_path = temp_path("lbgm_params3.csv");
  const std::string derived_path = temp_path("lbgm_derived3.csv");
  write_parameter_table(param_path, crippled, 0.95);
  write_derived_report(derived_path, build_derived_report(crippled, f.gen.sample));

  const auto rows = read_parameter_table(param_path);
  for (const auto& row : rows) CHECK(std::isnan(row.se));
  const auto text = render_text_report(rows, read_derived_report(derived_path));
  CHECK(text.find("se n/a") != std::string::npos);
}

}  // TEST_SUITE
