#include "lbgm/lbfgs.hpp"

#include <cmath>
#include <deque>
#include <limits>

namespace lbgm {

namespace {

constexpr double kArmijoC1 = 1e-4;
constexpr double kWolfeC2 = 0.9;

// Relative gradient criterion (Dennis & Schnabel): the predicted relative
// change of f from a unit relative change in x_i.
double scaled_gradient_norm(const Eigen::VectorXd& g, const Eigen::VectorXd& x, double f) {
  double norm = 0.0;
  for (int i = 0; i < g.size(); ++i)
    norm = std::max(norm, std::abs(g[i]) * std::max(1.0, std::abs(x[i])));
  return norm / std::max(1.0, std::abs(f));
}

struct LinePoint {
  double alpha = 0.0;
  double f = 0.0;
  double dphi = 0.0;  // directional derivative
};

// Cubic interpolation of the step inside [lo.alpha, hi.alpha]; falls back
// to bisection when the cubic is degenerate or leaves the bracket.
double interpolate_step(const LinePoint& lo, const LinePoint& hi) {
  const double d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (lo.alpha - hi.alpha);
  const double disc = d1 * d1 - lo.dphi * hi.dphi;
  if (disc >= 0.0) {
    const double d2 = std::sqrt(disc) * (hi.alpha > lo.alpha ? 1.0 : -1.0);
    const double denom = hi.dphi - lo.dphi + 2.0 * d2;
    if (denom != 0.0) {
      double alpha = hi.alpha - (hi.alpha - lo.alpha) * (hi.dphi + d2 - d1) / denom;
      const double a = std::min(lo.alpha, hi.alpha);
      const double b = std::max(lo.alpha, hi.alpha);
      const double margin = 0.1 * (b - a);
      if (std::isfinite(alpha) && alpha > a + margin && alpha < b - margin) return alpha;
    }
  }
  return 0.5 * (lo.alpha + hi.alpha);
}

}  // namespace

LbfgsResult lbfgs_minimize(const ObjectiveFn& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options) {
  const int n = static_cast<int>(x0.size());
  LbfgsResult res;
  res.x = std::move(x0);
  res.grad.resize(n);

  Eigen::VectorXd g(n);
  double f = objective(res.x, &g);
  if (!std::isfinite(f)) {
    res.f = f;
    res.grad = g;
    return res;  // infeasible start; caller retries elsewhere
  }
  res.trace.push_back(f);

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  Eigen::VectorXd x_new(n), g_new(n), direction(n);
  double h0_scale = 1.0;

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    if (scaled_gradient_norm(g, res.x, f) < options.g_scaled_tol && iter > 0) {
      res.converged = true;
      break;
    }

    // Two-loop recursion.
    direction = -g;
    std::vector<double> alpha_coef(s_hist.size());
    for (int k = static_cast<int>(s_hist.size()) - 1; k >= 0; --k) {
      alpha_coef[k] = rho_hist[k] * s_hist[k].dot(direction);
      direction -= alpha_coef[k] * y_hist[k];
    }
    direction *= h0_scale;
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(direction);
      direction += (alpha_coef[k] - beta) * s_hist[k];
    }

    double dphi0 = g.dot(direction);
    if (!(dphi0 < 0.0)) {  // not a descent direction: reset memory
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      direction = -g;
      dphi0 = g.dot(direction);
      h0_scale = 1.0;
      if (!(dphi0 < 0.0)) break;  // zero gradient
    }

    // Strong Wolfe line search (bracket + zoom).
    const LinePoint start{0.0, f, dphi0};
    LinePoint lo = start, hi;
    bool bracketed = false;
    bool accepted = false;
    double alpha = 1.0;
    double alpha_prev = 0.0;
    double f_prev_ls = f;
    double dphi_prev = dphi0;
    LinePoint best{0.0, f, dphi0};

    for (int ls = 0; ls < options.max_line_search; ++ls) {
      x_new = res.x + alpha * direction;
      double f_trial = objective(x_new, &g_new);
      double dphi = std::isfinite(f_trial) ? g_new.dot(direction)
                                           : std::numeric_limits<double>::quiet_NaN();

      if (!bracketed) {
        if (!std::isfinite(f_trial) || f_trial > f + kArmijoC1 * alpha * dphi0 ||
            (ls > 0 && f_trial >= f_prev_ls)) {
          lo = LinePoint{alpha_prev, f_prev_ls, dphi_prev};
          hi = LinePoint{alpha, std::isfinite(f_trial) ? f_trial : f + 1e100,
                         std::isfinite(dphi) ? dphi : 1.0};
          bracketed = true;
        } else if (std::abs(dphi) <= -kWolfeC2 * dphi0) {
          best = {alpha, f_trial, dphi};
          accepted = true;
          break;
        } else if (dphi >= 0.0) {
          lo = LinePoint{alpha, f_trial, dphi};
          hi = LinePoint{alpha_prev, f_prev_ls, dphi_prev};
          bracketed = true;
        } else {
          alpha_prev = alpha;
          f_prev_ls = f_trial;
          dphi_prev = dphi;
          alpha *= 2.0;
          continue;
        }
        alpha = interpolate_step(lo, hi);
        continue;
      }

      // Zoom phase.
      if (!std::isfinite(f_trial) || f_trial > f + kArmijoC1 * alpha * dphi0 ||
          f_trial >= lo.f) {
        hi = LinePoint{alpha, std::isfinite(f_trial) ? f_trial : f + 1e100,
                       std::isfinite(dphi) ? dphi : 1.0};
      } else {
        if (std::abs(dphi) <= -kWolfeC2 * dphi0) {
          best = {alpha, f_trial, dphi};
          accepted = true;
          break;
        }
        if (dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = LinePoint{alpha, f_trial, dphi};
      }
      if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, std::abs(lo.alpha))) break;
      alpha = interpolate_step(lo, hi);
    }

    if (!accepted) {
      // Accept a plain-decrease point if the zoom found one; otherwise stop.
      if (bracketed && lo.alpha > 0.0 && lo.f < f) {
        best = lo;
        x_new = res.x + best.alpha * direction;
        objective(x_new, &g_new);
        accepted = true;
      } else {
        res.converged = scaled_gradient_norm(g, res.x, f) < options.g_scaled_tol;
        break;
      }
    } else {
      x_new = res.x + best.alpha * direction;
    }

    const double f_old = f;
    Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd yv = g_new - g;
    res.x = x_new;
    f = best.f;
    g = g_new;
    res.iterations = iter + 1;
    res.trace.push_back(f);

    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
      h0_scale = sy / y_hist.back().squaredNorm();
      if (static_cast<int>(s_hist.size()) > options.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    const bool f_small_change =
        std::abs(f_old - f) <= options.f_rel_tol * std::max(1.0, std::abs(f_old));
    if (f_small_change && scaled_gradient_norm(g, res.x, f) < options.g_scaled_tol) {
      res.converged = true;
      break;
    }
  }

  res.f = f;
  res.grad = g;
  return res;
}

}  // namespace lbgm
