#ifndef LBGM_LBFGS_HPP
#define LBGM_LBFGS_HPP

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace lbgm {

/// Objective callback: returns f(x) and, when `grad` is non-null and the
/// value is finite, fills the gradient. May return +inf outside the
/// feasible region; the line search backtracks away from such points.
using ObjectiveFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct LbfgsOptions {
  int max_iterations = 2000;
  double f_rel_tol = 1e-9;     // relative objective decrease
  double g_scaled_tol = 1e-4;  // max_i |g_i| * max(1, |x_i|)
  int memory = 8;
  int max_line_search = 50;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step
};

/// Limited-memory BFGS with a strong-Wolfe line search. Convergence is
/// declared when an accepted step changes the objective by less than
/// f_rel_tol (relative) while the scaled gradient norm is below
/// g_scaled_tol, or when the line search stalls with the gradient
/// criterion already met.
LbfgsResult lbfgs_minimize(const ObjectiveFn& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options = {});

}  // namespace lbgm

#endif
