#include <doctest.h>

#include "viskin/optimizer.hpp"
#include "viskin/rng.hpp"

using namespace viskin;

TEST_SUITE("optimizer") {

TEST_CASE("converges on a 50-dimensional quadratic") {
  const int n = 50;
  Rng rng(77);
  Eigen::VectorXd diag(n), center(n);
  for (int i = 0; i < n; ++i) {
    diag[i] = rng.uniform(0.5, 20.0);
    center[i] = rng.uniform(-2.0, 2.0);
  }
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    const Eigen::VectorXd d = x - center;
    if (g != nullptr) *g = 2.0 * diag.asDiagonal() * d;
    return d.dot(diag.asDiagonal() * d);
  };
  LbfgsOptions opt;
  opt.max_iterations = 50;
  const LbfgsResult res = lbfgs_minimize(f, Eigen::VectorXd::Zero(n), opt);
  CHECK(res.f < 1e-10);
  CHECK((res.x - center).norm() < 1e-5);
  CHECK(res.iterations <= 50);
}

TEST_CASE("rosenbrock in 10 dimensions") {
  const int n = 10;
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    double total = 0.0;
    if (g != nullptr) g->setZero(n);
    for (int i = 0; i + 1 < n; ++i) {
      const double a = x[i + 1] - x[i] * x[i];
      const double b = 1.0 - x[i];
      total += 100.0 * a * a + b * b;
      if (g != nullptr) {
        (*g)[i] += -400.0 * a * x[i] - 2.0 * b;
        (*g)[i + 1] += 200.0 * a;
      }
    }
    return total;
  };
  LbfgsOptions opt;
  opt.max_iterations = 500;
  const LbfgsResult res = lbfgs_minimize(f, Eigen::VectorXd::Constant(n, -1.2), opt);
  CHECK(res.f < 1e-9);
}

TEST_CASE("loss trace is monotone non-increasing") {
  Rng rng(5);
  const int n = 12;
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(n, n);
  const Eigen::MatrixXd spd = a.transpose() * a + Eigen::MatrixXd::Identity(n, n);
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g != nullptr) *g = 2.0 * spd * x;
    return x.dot(spd * x);
  };
  const LbfgsResult res = lbfgs_minimize(f, Eigen::VectorXd::Constant(n, 1.0), {});
  for (size_t i = 1; i < res.trace.size(); ++i) CHECK(res.trace[i] <= res.trace[i - 1] + 1e-12);
}

TEST_CASE("gradient tolerance stops at a stationary point") {
  const Objective f = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g != nullptr) *g = 2.0 * x;
    return x.squaredNorm();
  };
  const LbfgsResult res = lbfgs_minimize(f, Eigen::VectorXd::Zero(3), {});
  CHECK(res.iterations == 0);
  CHECK(res.grad_norm == 0.0);
}

}  // TEST_SUITE
