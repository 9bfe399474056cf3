// Command-line front end: fit latent basis growth models to long-format
// CSV data, run Monte Carlo simulation cells, and render fitted results.
//
// Exit codes: 0 success, 1 input error, 2 estimation failure,
//             3 simulation attempt cap reached.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lbgm/data_model.hpp"
#include "lbgm/derived.hpp"
#include "lbgm/estimator.hpp"
#include "lbgm/io.hpp"
#include "lbgm/model.hpp"
#include "lbgm/simstudy.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInputError = 1;
constexpr int kExitEstimationFailure = 2;
constexpr int kExitSimulationCap = 3;

struct FitArgs {
  std::string data_path, spec_path, out_dir;
  std::vector<double> drop_values;
  std::uint64_t seed = 1;
  int retries = 10;
  int max_iterations = 2000;
  double level = 0.95;
};

struct SimArgs {
  std::string design_path, out_dir;
  int reps = 100;
  std::uint64_t seed = 1;
  int retries = 10;
  int max_iterations = 2000;
  int threads = 0;
  double level = 0.95;
};

int cmd_fit(const FitArgs& args) {
  lbgm::LongitudinalSample sample;
  lbgm::ModelSpec spec;
  try {
    lbgm::LoadOptions load_options;
    load_options.drop_values = args.drop_values;
    lbgm::LoadReport load_report;
    sample = lbgm::load_long_csv(args.data_path, load_options, &load_report);
    if (load_report.rows_dropped > 0)
      std::cerr << "note: dropped " << load_report.rows_dropped
                << " rows with missing or sentinel values\n";
    spec = lbgm::read_model_spec(args.spec_path);
    for (const auto& o : spec.outcomes)
      if (sample.outcome_index(o.label) < 0) {
        std::cerr << "error: outcome '" << o.label << "' not present in "
                  << args.data_path << "\n";
        return kExitInputError;
      }
    if (const auto violations = lbgm::validate(sample); !violations.empty()) {
      std::cerr << "error: data fail validation\n"
                << lbgm::format_violations(violations);
      return kExitInputError;
    }
    std::filesystem::create_directories(args.out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }

  try {
    lbgm::FitOptions options;
    options.rng_seed = args.seed;
    options.max_retries = args.retries;
    options.max_iterations = args.max_iterations;
    const lbgm::FitResult fit = lbgm::fit(sample, spec, options);
    const lbgm::DerivedReport derived = lbgm::build_derived_report(fit, sample);

    const std::filesystem::path out(args.out_dir);
    lbgm::write_parameter_table((out / "parameters.csv").string(), fit, args.level);
    lbgm::write_derived_report((out / "derived.csv").string(), derived);
    lbgm::write_trajectory((out / "trajectory.csv").string(), sample, fit);

    std::cout << "status: " << lbgm::to_string(fit.status)
              << "  deviance: " << fit.deviance << "  iterations: " << fit.iterations
              << "  retries: " << fit.retries_used << "\n";
    if (!fit.vcov_available())
      std::cout << "note: standard errors unavailable (non-positive-definite Hessian)\n";
    return fit.status == lbgm::FitStatus::Converged ? kExitOk : kExitEstimationFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const std::exception& e) {
    std::cerr << "estimation error: " << e.what() << "\n";
    return kExitEstimationFailure;
  }
}

int cmd_simulate(const SimArgs& args) {
  lbgm::SimulationDesign design;
  try {
    design = lbgm::read_design(args.design_path);
    std::filesystem::create_directories(args.out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }

  try {
    lbgm::StudyOptions options;
    options.fit.max_retries = args.retries;
    options.fit.max_iterations = args.max_iterations;
    options.ci_level = args.level;
    options.n_threads = args.threads;
    const lbgm::StudyResult result = lbgm::run_study(design, args.reps, args.seed, options);

    const std::filesystem::path out(args.out_dir);
    lbgm::write_metric_report((out / "metrics.csv").string(), result.metrics);
    lbgm::write_replication_estimates((out / "replications.csv").string(), result,
                                      result.metrics.parameter_names);

    std::printf("replications: %d converged of %d attempted (convergence rate %.4f)\n",
                result.metrics.replications, result.metrics.attempted,
                result.metrics.convergence_rate);
    for (std::size_t k = 0; k < result.metrics.parameter_names.size(); ++k)
      if (result.metrics.absolute_scale[k])
        std::printf("note: %s has zero truth; bias/rmse reported on the absolute scale\n",
                    result.metrics.parameter_names[k].c_str());
    if (result.metrics.capped) {
      std::cerr << "warning: attempt cap reached before the requested number of "
                   "convergent replications; partial metrics written\n";
      return kExitSimulationCap;
    }
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const std::exception& e) {
    std::cerr << "simulation error: " << e.what() << "\n";
    return kExitEstimationFailure;
  }
}

int cmd_report(const std::string& fit_dir) {
  try {
    const std::filesystem::path dir(fit_dir);
    const auto parameters = lbgm::read_parameter_table((dir / "parameters.csv").string());
    const auto derived = lbgm::read_derived_report((dir / "derived.csv").string());
    std::cout << lbgm::render_text_report(parameters, derived);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent basis growth modeling toolkit"};
  app.require_subcommand(1);

  FitArgs fit_args;
  CLI::App* fit_cmd = app.add_subcommand(
      "fit", "Fit a univariate or parallel model to long-format CSV data");
  fit_cmd->add_option("--data", fit_args.data_path, "Long CSV (id,outcome,wave,time,value)")
      ->required();
  fit_cmd->add_option("--spec", fit_args.spec_path, "Model spec JSON")->required();
  fit_cmd->add_option("--out", fit_args.out_dir, "Output directory")->required();
  fit_cmd->add_option("--drop-values", fit_args.drop_values,
                      "Sentinel values treated as missing (comma separated)")
      ->delimiter(',');
  fit_cmd->add_option("--seed", fit_args.seed, "Seed for retry jitter (default 1)");
  fit_cmd->add_option("--retries", fit_args.retries, "Max restarts (default 10)");
  fit_cmd->add_option("--max-iterations", fit_args.max_iterations,
                      "Optimizer iteration cap (default 2000)");
  fit_cmd->add_option("--level", fit_args.level, "Wald CI level (default 0.95)");

  SimArgs sim_args;
  CLI::App* sim_cmd =
      app.add_subcommand("simulate", "Run a Monte Carlo cell from a design file");
  sim_cmd->add_option("--design", sim_args.design_path, "Design JSON")->required();
  sim_cmd->add_option("--reps", sim_args.reps, "Convergent replications wanted")
      ->required();
  sim_cmd->add_option("--out", sim_args.out_dir, "Output directory")->required();
  sim_cmd->add_option("--seed", sim_args.seed, "Master seed (default 1)");
  sim_cmd->add_option("--retries", sim_args.retries, "Max restarts per fit (default 10)");
  sim_cmd->add_option("--max-iterations", sim_args.max_iterations,
                      "Optimizer iteration cap per fit (default 2000)");
  sim_cmd->add_option("--threads", sim_args.threads,
                      "Worker threads (default: hardware concurrency)");
  sim_cmd->add_option("--level", sim_args.level, "Wald CI level (default 0.95)");

  std::string report_dir;
  CLI::App* report_cmd =
      app.add_subcommand("report", "Render a fitted model summary as text");
  report_cmd->add_option("--fit", report_dir, "Directory written by 'lbgm fit'")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInputError;
  }

  if (fit_cmd->parsed()) return cmd_fit(fit_args);
  if (sim_cmd->parsed()) return cmd_simulate(sim_args);
  if (report_cmd->parsed()) return cmd_report(report_dir);
  return kExitInputError;
}
