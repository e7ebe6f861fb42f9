#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "viskin/geometry.hpp"

namespace viskin {

using JointVector = Eigen::VectorXd;

/// One Denavit-Hartenberg row: joint angle offset, link offset, link length,
/// link twist. Signs of a and d are unconstrained (the gauge scales them).
struct DHRow {
  double omega = 0.0;
  double d = 0.0;
  double a = 0.0;
  double alpha = 0.0;
};

/// Base frame plus an ordered DH row per degree of freedom.
struct KinematicParams {
  Pose6 base;
  std::vector<DHRow> rows;

  int dof() const { return static_cast<int>(rows.size()); }
};

/// Classic DH joint transform with theta = omega + j:
///   [ cos t  -sin t cos a   sin t sin a   a cos t ]
///   [ sin t   cos t cos a  -cos t sin a   a sin t ]
///   [ 0       sin a         cos a         d       ]
///   [ 0       0             0             1       ]
template <typename S>
PoseT<S> dh_transform(S omega, S d, S a, S alpha, S j) {
  const S t = omega + j;
  const S ct = std::cos(t), st = std::sin(t);
  const S ca = std::cos(alpha), sa = std::sin(alpha);
  Mat4<S> m;
  m << ct, -st * ca, st * sa, a * ct,
       st, ct * ca, -ct * sa, a * st,
       S(0), sa, ca, d,
       S(0), S(0), S(0), S(1);
  return PoseT<S>(m);
}

inline Pose dh_transform(const DHRow& row, double j) {
  return dh_transform(row.omega, row.d, row.a, row.alpha, j);
}

/// Partial derivatives of the DH transform with respect to theta (= omega or
/// the joint value), d, a, alpha.
struct DhDerivatives {
  Mat4d dtheta, dd, da, dalpha;
};

inline DhDerivatives dh_derivatives(const DHRow& row, double j) {
  const double t = row.omega + j;
  const double ct = std::cos(t), st = std::sin(t);
  const double ca = std::cos(row.alpha), sa = std::sin(row.alpha);
  DhDerivatives g;
  g.dtheta.setZero();
  g.dtheta(0, 0) = -st;
  g.dtheta(0, 1) = -ct * ca;
  g.dtheta(0, 2) = ct * sa;
  g.dtheta(0, 3) = -row.a * st;
  g.dtheta(1, 0) = ct;
  g.dtheta(1, 1) = -st * ca;
  g.dtheta(1, 2) = st * sa;
  g.dtheta(1, 3) = row.a * ct;
  g.dd.setZero();
  g.dd(2, 3) = 1.0;
  g.da.setZero();
  g.da(0, 3) = ct;
  g.da(1, 3) = st;
  g.dalpha.setZero();
  g.dalpha(0, 1) = st * sa;
  g.dalpha(0, 2) = st * ca;
  g.dalpha(1, 1) = -ct * sa;
  g.dalpha(1, 2) = -ct * ca;
  g.dalpha(2, 1) = ca;
  g.dalpha(2, 2) = -sa;
  return g;
}

namespace detail {
inline void check_joint_dim(const KinematicParams& kin, const JointVector& j) {
  if (j.size() != kin.dof())
    throw DimensionMismatch("joint vector length does not match robot dof");
}
}  // namespace detail

/// P = B * prod_i T_i(j[i]).
inline Pose forward_kinematics(const KinematicParams& kin, const JointVector& j) {
  detail::check_joint_dim(kin, j);
  Mat4d m = to_pose(kin.base).m;
  for (int i = 0; i < kin.dof(); ++i) m *= dh_transform(kin.rows[i], j[i]).m;
  return Pose(m);
}

/// Forward pass keeping per-joint transforms and left prefixes so gradients
/// can be pushed back through the chain. prefix[i] = B * T_1 ... T_i, with
/// prefix[0] = B.
struct FkCache {
  Pose pose;
  std::vector<Mat4d> joint_transforms;  // T_i
  std::vector<Mat4d> prefix;            // size dof+1
};

inline FkCache forward_kinematics_cache(const KinematicParams& kin, const JointVector& j) {
  detail::check_joint_dim(kin, j);
  FkCache c;
  const int n = kin.dof();
  c.joint_transforms.resize(n);
  c.prefix.resize(n + 1);
  c.prefix[0] = to_pose(kin.base).m;
  for (int i = 0; i < n; ++i) {
    c.joint_transforms[i] = dh_transform(kin.rows[i], j[i]).m;
    c.prefix[i + 1] = c.prefix[i] * c.joint_transforms[i];
  }
  c.pose = Pose(c.prefix[n]);
  return c;
}

/// Gradient sinks for the kinematic chain. dh is n x 4 ordered
/// (omega, d, a, alpha); any pointer may be null to skip that block.
struct FkGradient {
  Vector6d* base = nullptr;                 // (xyz, rpy)
  Eigen::Matrix<double, Eigen::Dynamic, 4>* dh = nullptr;
  Eigen::VectorXd* joints = nullptr;
};

/// Accumulates d<adjoint, P>/d(params) into the sinks given the 4x4 adjoint
/// dL/dP. Uses a reverse sweep building right suffixes on the fly.
inline void fk_backpropagate(const KinematicParams& kin, const JointVector& j,
                             const FkCache& cache, const Mat4d& adjoint,
                             const FkGradient& out) {
  const int n = kin.dof();
  Mat4d suffix = Mat4d::Identity();
  for (int i = n - 1; i >= 0; --i) {
    const Mat4d dl_dti = cache.prefix[i].transpose() * adjoint * suffix.transpose();
    const DhDerivatives g = dh_derivatives(kin.rows[i], j[i]);
    if (out.dh != nullptr) {
      (*out.dh)(i, 0) += dl_dti.cwiseProduct(g.dtheta).sum();
      (*out.dh)(i, 1) += dl_dti.cwiseProduct(g.dd).sum();
      (*out.dh)(i, 2) += dl_dti.cwiseProduct(g.da).sum();
      (*out.dh)(i, 3) += dl_dti.cwiseProduct(g.dalpha).sum();
    }
    if (out.joints != nullptr)
      (*out.joints)[i] += dl_dti.cwiseProduct(g.dtheta).sum();
    suffix = cache.joint_transforms[i] * suffix;
  }
  if (out.base != nullptr) {
    // P = B * Q with Q = T_1 ... T_n (the final suffix); dL/dB = adjoint * Q^T.
    const Mat4d db = adjoint * suffix.transpose();
    const auto jac = pose6_jacobian(kin.base);
    for (int k = 0; k < 6; ++k) (*out.base)[k] += db.cwiseProduct(jac[k]).sum();
  }
}

/// Geometric Jacobian expressed in the end-effector frame (linear on top,
/// angular below), matching the eq-of-motion convention of the IBVS baseline.
inline Eigen::Matrix<double, 6, Eigen::Dynamic> robot_jacobian(
    const KinematicParams& kin, const JointVector& j) {
  detail::check_joint_dim(kin, j);
  const int n = kin.dof();
  const FkCache c = forward_kinematics_cache(kin, j);
  const Eigen::Vector3d p_e = c.pose.translation();
  const Mat3d r_e_t = c.pose.rotation().transpose();
  Eigen::Matrix<double, 6, Eigen::Dynamic> jac(6, n);
  for (int i = 0; i < n; ++i) {
    // Joint i rotates about the z axis of frame i-1 (prefix[i]).
    const Eigen::Vector3d axis = c.prefix[i].block<3, 1>(0, 2);
    const Eigen::Vector3d origin = c.prefix[i].block<3, 1>(0, 3);
    jac.block<3, 1>(0, i) = r_e_t * axis.cross(p_e - origin);
    jac.block<3, 1>(3, i) = r_e_t * axis;
  }
  return jac;
}

/// Squared L2 distance between joint vectors.
inline double joint_error(const JointVector& j1, const JointVector& j2) {
  if (j1.size() != j2.size()) throw DimensionMismatch("joint vectors differ in length");
  return (j1 - j2).squaredNorm();
}

/// Damped least-squares IK on the end-effector-frame error twist. Returns
/// the joint vector when the Frobenius pose error drops below `tol`,
/// otherwise nullopt (the target is unreachable from this seed).
inline std::optional<JointVector> ik_solve(const KinematicParams& kin, const Pose& target,
                                           const JointVector& seed, double tol = 1e-6,
                                           int max_iterations = 200) {
  JointVector j = seed;
  double lambda = 1e-6;
  Pose pose = forward_kinematics(kin, j);
  double err = pose_error(pose, target);
  for (int iter = 0; iter < max_iterations && err >= tol; ++iter) {
    const Mat4d rel = inverse(pose).m * target.m;
    Eigen::AngleAxisd aa{Mat3d(rel.block<3, 3>(0, 0))};
    Vector6d twist;
    twist.head<3>() = rel.block<3, 1>(0, 3);
    twist.tail<3>() = aa.angle() * aa.axis();
    const auto jac = robot_jacobian(kin, j);
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    bool improved = false;
    for (int tries = 0; tries < 12; ++tries) {
      Eigen::MatrixXd damped = jtj;
      damped.diagonal().array() += lambda;
      const JointVector dj = damped.ldlt().solve(jac.transpose() * twist);
      const JointVector j_new = j + dj;
      const Pose pose_new = forward_kinematics(kin, j_new);
      const double err_new = pose_error(pose_new, target);
      if (err_new < err) {
        j = j_new;
        pose = pose_new;
        err = err_new;
        lambda = std::max(lambda * 0.5, 1e-9);
        improved = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  if (err < tol) return j;
  return std::nullopt;
}

}  // namespace viskin
