#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace viskin {

/// Objective callback: returns f(x) and writes the gradient when `grad` is
/// non-null.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct LbfgsOptions {
  int max_iterations = 200;
  int history = 30;
  // Strong Wolfe constants.
  double c1 = 1e-4;
  double c2 = 0.9;
  double grad_tol = 1e-9;
  double loss_delta_tol = 1e-12;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool line_search_failed = false;
  std::vector<double> trace;  // objective value after each accepted iteration
};

/// Limited-memory BFGS with a strong Wolfe line search. Deterministic; a
/// line-search failure terminates with the best iterate so far rather than
/// throwing.
LbfgsResult lbfgs_minimize(const Objective& f, const Eigen::VectorXd& x0,
                           const LbfgsOptions& options = {});

}  // namespace viskin
