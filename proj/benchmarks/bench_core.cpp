// Microbenchmarks for the hot paths: deviance evaluation, its analytic
// gradient, data generation, and a complete small fit.
#include <benchmark/benchmark.h>

#include <random>

#include "lbgm/estimator.hpp"
#include "lbgm/simstudy.hpp"

namespace {

lbgm::SimulationDesign make_design(int n, int waves) {
  lbgm::SimulationDesign d;
  d.n = n;
  d.wave_times.resize(waves);
  for (int w = 0; w < waves; ++w) d.wave_times[w] = w;
  d.delta = 0.25;
  d.rho_between = 0.3;
  d.rho_resid = 0.3;
  for (const char* label : {"y", "z"}) {
    lbgm::OutcomeDesign o;
    o.label = label;
    o.mu_eta0 = label[0] == 'y' ? 50.0 : 30.0;
    o.psi00 = 25;
    o.mu_eta1 = label[0] == 'y' ? 4.0 : 5.0;
    o.psi11 = 1;
    o.rho_within = 0.3;
    o.theta_eps = 1;
    o.gammas.resize(waves - 1);
    for (int k = 0; k < waves - 1; ++k) o.gammas[k] = 1.0 - 0.8 * k / (waves - 2);
    o.gammas[0] = 1.0;
    o.fixed_interval = 1;
    d.outcomes.push_back(std::move(o));
  }
  return d;
}

void BM_Deviance(benchmark::State& state) {
  const auto design = make_design(static_cast<int>(state.range(0)), 10);
  std::mt19937_64 rng(1);
  const auto gen = lbgm::generate_dataset(design, rng);
  const auto spec = design.model_spec();
  for (auto _ : state)
    benchmark::DoNotOptimize(lbgm::fiml_deviance(gen.truth, spec, gen.sample));
}
BENCHMARK(BM_Deviance)->Arg(100)->Arg(500);

void BM_DevianceGradient(benchmark::State& state) {
  const auto design = make_design(static_cast<int>(state.range(0)), 10);
  std::mt19937_64 rng(1);
  const auto gen = lbgm::generate_dataset(design, rng);
  const auto spec = design.model_spec();
  for (auto _ : state)
    benchmark::DoNotOptimize(lbgm::fiml_deviance_gradient(gen.truth, spec, gen.sample));
}
BENCHMARK(BM_DevianceGradient)->Arg(100)->Arg(500);

void BM_GenerateDataset(benchmark::State& state) {
  const auto design = make_design(static_cast<int>(state.range(0)), 10);
  std::mt19937_64 rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(lbgm::generate_dataset(design, rng));
}
BENCHMARK(BM_GenerateDataset)->Arg(500);

void BM_Fit(benchmark::State& state) {
  const auto design = make_design(static_cast<int>(state.range(0)), 6);
  std::mt19937_64 rng(1);
  const auto gen = lbgm::generate_dataset(design, rng);
  const auto spec = design.model_spec();
  lbgm::FitOptions options;
  options.compute_vcov = state.range(1) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(lbgm::fit(gen.sample, spec, options));
}
BENCHMARK(BM_Fit)->Args({200, 0})->Args({200, 1})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
