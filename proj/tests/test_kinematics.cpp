#include <doctest.h>

#include "viskin/kinematics.hpp"
#include "viskin/rng.hpp"

using namespace viskin;

namespace {

KinematicParams random_arm(Rng& rng, int dof = 6) {
  KinematicParams kin;
  kin.base.xyz = Eigen::Vector3d(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                 rng.uniform(-0.3, 0.3));
  kin.base.rpy = Eigen::Vector3d(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                 rng.uniform(-0.5, 0.5));
  kin.rows.resize(dof);
  for (DHRow& row : kin.rows) {
    row.omega = rng.uniform(-M_PI, M_PI);
    row.d = rng.uniform(-0.4, 0.4);
    row.a = rng.uniform(-0.4, 0.4);
    row.alpha = rng.uniform(-M_PI, M_PI);
  }
  return kin;
}

JointVector random_joints(Rng& rng, int dof) {
  JointVector j(dof);
  for (int i = 0; i < dof; ++i) j[i] = rng.uniform(-M_PI / 2, M_PI / 2);
  return j;
}

// End-effector-frame twist from central differences of the forward
// kinematics, the independent check on the analytic Jacobian.
Vector6d fd_twist_column(const KinematicParams& kin, const JointVector& j, int col, double h) {
  JointVector hi = j, lo = j;
  hi[col] += h;
  lo[col] -= h;
  const Pose p_hi = forward_kinematics(kin, hi);
  const Pose p_lo = forward_kinematics(kin, lo);
  const Pose p = forward_kinematics(kin, j);
  const Mat3d r_t = p.rotation().transpose();
  const Eigen::Vector3d v = r_t * ((p_hi.translation() - p_lo.translation()) / (2 * h));
  const Mat3d dr = (p_hi.rotation() - p_lo.rotation()) / (2 * h);
  const Mat3d omega_body = r_t * dr;  // skew-symmetric in the body frame
  Vector6d out;
  out.head<3>() = v;
  out.tail<3>() = Eigen::Vector3d(omega_body(2, 1), omega_body(0, 2), omega_body(1, 0));
  return out;
}

}  // namespace

TEST_SUITE("kinematics") {

TEST_CASE("dh_transform pinned values") {
  CHECK(pose_error(dh_transform({0, 0, 0, 0}, 0.0), Pose()) < 1e-15);

  // a=1, j=pi/2: rotation Rz(pi/2), translation (0, 1, 0).
  const Pose p = dh_transform({0, 0, 1, 0}, M_PI / 2);
  Pose expected = rot_pose_z(M_PI / 2);
  expected.m(1, 3) = 1.0;
  CHECK(pose_error(p, expected) < 1e-12);

  // Independently derived matrix for (omega=0, d=0.5, a=0.2, alpha=pi/2), j=0.
  Mat4d m;
  m << 1, 0, 0, 0.2,
       0, 0, -1, 0,
       0, 1, 0, 0.5,
       0, 0, 0, 1;
  CHECK((dh_transform({0, 0.5, 0.2, M_PI / 2}, 0.0).m - m).norm() < 1e-12);
}

TEST_CASE("dh theta-shift gauge") {
  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    DHRow row{rng.uniform(-M_PI, M_PI), rng.uniform(-1, 1), rng.uniform(-1, 1),
              rng.uniform(-M_PI, M_PI)};
    const double j = rng.uniform(-M_PI, M_PI), delta = rng.uniform(-1, 1);
    DHRow shifted = row;
    shifted.omega += delta;
    CHECK(pose_error(dh_transform(row, j), dh_transform(shifted, j - delta)) < 1e-12);
  }
}

TEST_CASE("dh derivative matrices match finite differences") {
  Rng rng(37);
  const double h = 1e-7;
  for (int i = 0; i < 20; ++i) {
    DHRow row{rng.uniform(-M_PI, M_PI), rng.uniform(-1, 1), rng.uniform(-1, 1),
              rng.uniform(-M_PI, M_PI)};
    const double j = rng.uniform(-M_PI, M_PI);
    const DhDerivatives g = dh_derivatives(row, j);
    auto fd = [&](auto mutate) {
      DHRow hi = row, lo = row;
      double jhi = j, jlo = j;
      mutate(hi, jhi, +h);
      mutate(lo, jlo, -h);
      return Mat4d((dh_transform(hi, jhi).m - dh_transform(lo, jlo).m) / (2 * h));
    };
    CHECK((fd([](DHRow&, double& jj, double d) { jj += d; }) - g.dtheta).norm() < 1e-6);
    CHECK((fd([](DHRow& r, double&, double d) { r.d += d; }) - g.dd).norm() < 1e-6);
    CHECK((fd([](DHRow& r, double&, double d) { r.a += d; }) - g.da).norm() < 1e-6);
    CHECK((fd([](DHRow& r, double&, double d) { r.alpha += d; }) - g.dalpha).norm() < 1e-6);
  }
}

TEST_CASE("forward kinematics basics") {
  KinematicParams kin;
  kin.rows.assign(3, DHRow{});
  JointVector j = JointVector::Zero(3);
  CHECK(pose_error(forward_kinematics(kin, j), Pose()) < 1e-15);

  KinematicParams one;
  one.rows = {DHRow{0, 0, 1, 0}};
  JointVector j1 = JointVector::Zero(1);
  CHECK(pose_error(forward_kinematics(one, j1), translation_pose(1.0, 0.0, 0.0)) < 1e-12);

  JointVector wrong = JointVector::Zero(2);
  CHECK_THROWS_AS(forward_kinematics(one, wrong), DimensionMismatch);
}

TEST_CASE("forward kinematics output satisfies pose invariants") {
  Rng rng(41);
  for (int i = 0; i < 50; ++i) {
    const KinematicParams kin = random_arm(rng);
    const Pose p = forward_kinematics(kin, random_joints(rng, 6));
    CHECK(is_valid_pose(p));
  }
}

TEST_CASE("jacobian of a single revolute joint with point on axis") {
  KinematicParams kin;
  kin.rows = {DHRow{0, 0.3, 0, 0}};  // end-effector on the rotation axis
  const JointVector j = JointVector::Zero(1);
  const auto jac = robot_jacobian(kin, j);
  CHECK(jac.block<3, 1>(0, 0).norm() < 1e-12);
  CHECK((jac.block<3, 1>(3, 0) - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);
}

TEST_CASE("jacobian matches finite differences on random arms") {
  Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const KinematicParams kin = random_arm(rng);
    const JointVector j = random_joints(rng, 6);
    const auto jac = robot_jacobian(kin, j);
    for (int col = 0; col < 6; ++col) {
      const Vector6d fd = fd_twist_column(kin, j, col, 1e-6);
      const double scale = std::max(1.0, fd.norm());
      CHECK((jac.col(col) - fd).norm() / scale < 1e-5);
    }
  }
  KinematicParams kin = random_arm(rng);
  CHECK_THROWS_AS(robot_jacobian(kin, JointVector::Zero(4)), DimensionMismatch);
}

TEST_CASE("joint_error") {
  JointVector a(2), b(2);
  a << 0, 0;
  b << 3, 4;
  CHECK(joint_error(a, a) == 0.0);
  CHECK(joint_error(a, b) == doctest::Approx(25.0));
  JointVector c(1), d(1);
  c << 1;
  d << -1;
  CHECK(joint_error(c, d) == doctest::Approx(4.0));
  CHECK_THROWS_AS(joint_error(a, c), DimensionMismatch);
}

TEST_CASE("fk backpropagation matches finite differences") {
  Rng rng(47);
  for (int trial = 0; trial < 30; ++trial) {
    const KinematicParams kin = random_arm(rng, 4);
    const JointVector j = random_joints(rng, 4);
    // Random adjoint defines the scalar function L = <A, FK>.
    Mat4d adj;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) adj(r, c) = rng.uniform(-1, 1);
    const FkCache cache = forward_kinematics_cache(kin, j);
    Vector6d base_grad = Vector6d::Zero();
    Eigen::Matrix<double, Eigen::Dynamic, 4> dh_grad(4, 4);
    dh_grad.setZero();
    JointVector joint_grad = JointVector::Zero(4);
    FkGradient out{&base_grad, &dh_grad, &joint_grad};
    fk_backpropagate(kin, j, cache, adj, out);

    const double h = 1e-6;
    auto value = [&](const KinematicParams& k, const JointVector& q) {
      return adj.cwiseProduct(forward_kinematics(k, q).m).sum();
    };
    for (int i = 0; i < 4; ++i) {
      JointVector hi = j, lo = j;
      hi[i] += h;
      lo[i] -= h;
      CHECK(joint_grad[i] == doctest::Approx((value(kin, hi) - value(kin, lo)) / (2 * h))
                                 .epsilon(1e-5));
    }
    for (int i = 0; i < 4; ++i) {
      KinematicParams hi = kin, lo = kin;
      hi.rows[i].a += h;
      lo.rows[i].a -= h;
      CHECK(dh_grad(i, 2) == doctest::Approx((value(hi, j) - value(lo, j)) / (2 * h))
                                 .epsilon(1e-5));
    }
    {
      KinematicParams hi = kin, lo = kin;
      hi.base.rpy[1] += h;
      lo.base.rpy[1] -= h;
      CHECK(base_grad[4] == doctest::Approx((value(hi, j) - value(lo, j)) / (2 * h))
                                .epsilon(1e-5));
    }
  }
}

TEST_CASE("ik_solve round trips a reachable pose") {
  Rng rng(53);
  const KinematicParams kin = random_arm(rng);
  const JointVector j_true = random_joints(rng, 6);
  const Pose target = forward_kinematics(kin, j_true);
  JointVector seed = j_true;
  for (int i = 0; i < 6; ++i) seed[i] += rng.uniform(-0.3, 0.3);
  const auto solution = ik_solve(kin, target, seed);
  REQUIRE(solution.has_value());
  CHECK(pose_error(forward_kinematics(kin, *solution), target) < 1e-6);
}

}  // TEST_SUITE
