#include "viskin/optimizer.hpp"

#include <cmath>
#include <deque>

namespace viskin {

namespace {

struct Eval {
  double f;
  Eigen::VectorXd g;
};

// Cubic interpolation of a step inside [lo, hi] given values/derivatives at
// the ends; falls back to bisection when the interpolant is uninformative.
double interpolate_step(double a_lo, double f_lo, double g_lo, double a_hi, double f_hi,
                        double g_hi) {
  const double d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi);
  const double disc = d1 * d1 - g_lo * g_hi;
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), a_hi - a_lo);
    const double denom = g_hi - g_lo + 2.0 * d2;
    if (std::abs(denom) > 1e-300) {
      const double t = a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom;
      const double lo = std::min(a_lo, a_hi), hi = std::max(a_lo, a_hi);
      const double margin = 0.05 * (hi - lo);
      if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
    }
  }
  return 0.5 * (a_lo + a_hi);
}

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& objective, const Eigen::VectorXd& x0,
                           const LbfgsOptions& opt) {
  const int n = static_cast<int>(x0.size());
  LbfgsResult res;
  res.x = x0;

  Eigen::VectorXd g(n);
  double f = objective(res.x, &g);
  res.trace.reserve(opt.max_iterations);

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  auto phi = [&](const Eigen::VectorXd& x, double alpha, const Eigen::VectorXd& d,
                 Eval& out) -> double {
    out.g.resize(n);
    out.f = objective(x + alpha * d, &out.g);
    return out.f;
  };

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    if (g.norm() < opt.grad_tol) break;

    // Two-loop recursion.
    Eigen::VectorXd q = g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha_coef(m);
    for (int i = m - 1; i >= 0; --i) {
      alpha_coef[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha_coef[i] * y_hist[i];
    }
    if (m > 0) {
      const double gamma = s_hist[m - 1].dot(y_hist[m - 1]) / y_hist[m - 1].squaredNorm();
      q *= gamma;
    }
    for (int i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha_coef[i] - beta) * s_hist[i];
    }
    Eigen::VectorXd d = -q;

    double dg = d.dot(g);
    if (!(dg < 0.0)) {  // not a descent direction, reset to steepest descent
      d = -g;
      dg = d.dot(g);
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    // Strong Wolfe line search (bracket then zoom).
    const double f0 = f, g0 = dg;
    double alpha_prev = 0.0, f_prev = f0, g_prev = g0;
    double alpha = (iter == 0 && m == 0) ? std::min(1.0, 1.0 / std::max(g.norm(), 1e-12)) : 1.0;
    const double alpha_max = 1e6;
    Eval trial;
    bool found = false;
    double alpha_final = 0.0;
    Eval final_eval;

    auto zoom = [&](double a_lo, double f_lo, double dg_lo, double a_hi, double f_hi,
                    double dg_hi) -> bool {
      for (int z = 0; z < 30; ++z) {
        const double a = interpolate_step(a_lo, f_lo, dg_lo, a_hi, f_hi, dg_hi);
        if (!(std::abs(a_hi - a_lo) > 1e-16 * std::max(1.0, std::abs(a_lo)))) break;
        phi(res.x, a, d, trial);
        const double dgt = trial.g.dot(d);
        if (trial.f > f0 + opt.c1 * a * g0 || trial.f >= f_lo) {
          a_hi = a;
          f_hi = trial.f;
          dg_hi = dgt;
        } else {
          if (std::abs(dgt) <= -opt.c2 * g0) {
            alpha_final = a;
            final_eval = trial;
            return true;
          }
          if (dgt * (a_hi - a_lo) >= 0.0) {
            a_hi = a_lo;
            f_hi = f_lo;
            dg_hi = dg_lo;
          }
          a_lo = a;
          f_lo = trial.f;
          dg_lo = dgt;
        }
      }
      // Accept the best sufficient-decrease point even without curvature.
      if (f_lo < f0 && a_lo > 0.0) {
        phi(res.x, a_lo, d, trial);
        alpha_final = a_lo;
        final_eval = trial;
        return true;
      }
      return false;
    };

    for (int ls = 0; ls < 20 && !found; ++ls) {
      phi(res.x, alpha, d, trial);
      const double dgt = trial.g.dot(d);
      if (trial.f > f0 + opt.c1 * alpha * g0 || (ls > 0 && trial.f >= f_prev)) {
        found = zoom(alpha_prev, f_prev, g_prev, alpha, trial.f, dgt);
        break;
      }
      if (std::abs(dgt) <= -opt.c2 * g0) {
        alpha_final = alpha;
        final_eval = trial;
        found = true;
        break;
      }
      if (dgt >= 0.0) {
        found = zoom(alpha, trial.f, dgt, alpha_prev, f_prev, g_prev);
        break;
      }
      alpha_prev = alpha;
      f_prev = trial.f;
      g_prev = dgt;
      alpha = std::min(2.0 * alpha, alpha_max);
      if (alpha >= alpha_max) break;
    }

    if (!found) {
      res.line_search_failed = true;
      break;
    }

    const Eigen::VectorXd step = alpha_final * d;
    const Eigen::VectorXd y = final_eval.g - g;
    const double sy = step.dot(y);
    if (sy > 1e-12 * step.norm() * y.norm()) {
      s_hist.push_back(step);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    res.x += step;
    const double f_old = f;
    f = final_eval.f;
    g = final_eval.g;
    res.iterations = iter + 1;
    res.trace.push_back(f);
    if (std::abs(f_old - f) < opt.loss_delta_tol * std::max(1.0, std::abs(f_old))) break;
  }

  res.f = f;
  res.grad_norm = g.norm();
  return res;
}

}  // namespace viskin
