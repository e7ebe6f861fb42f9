#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "viskin/errors.hpp"

namespace viskin {

template <typename S>
using Mat4 = Eigen::Matrix<S, 4, 4>;
template <typename S>
using Mat3 = Eigen::Matrix<S, 3, 3>;
template <typename S>
using Vec3 = Eigen::Matrix<S, 3, 1>;
template <typename S>
using Vec2 = Eigen::Matrix<S, 2, 1>;

using Mat4d = Mat4<double>;
using Mat3d = Mat3<double>;
using Vector6d = Eigen::Matrix<double, 6, 1>;

/// Rigid transform as a 4x4 homogeneous matrix. Rotation block orthonormal
/// with det +1, bottom row [0,0,0,1]. World-frame poses left-multiply:
/// p_world = T * p.
template <typename S>
struct PoseT {
  Mat4<S> m = Mat4<S>::Identity();

  PoseT() = default;
  explicit PoseT(const Mat4<S>& mat) : m(mat) {}

  static PoseT identity() { return PoseT(); }

  static PoseT from_rt(const Mat3<S>& r, const Vec3<S>& t) {
    PoseT p;
    p.m.template block<3, 3>(0, 0) = r;
    p.m.template block<3, 1>(0, 3) = t;
    return p;
  }

  Mat3<S> rotation() const { return m.template block<3, 3>(0, 0); }
  Vec3<S> translation() const { return m.template block<3, 1>(0, 3); }

  Vec3<S> apply(const Vec3<S>& p) const {
    return rotation() * p + translation();
  }
};

using Pose = PoseT<double>;

template <typename S>
PoseT<S> compose(const PoseT<S>& a, const PoseT<S>& b) {
  return PoseT<S>(Mat4<S>(a.m * b.m));
}

template <typename S>
PoseT<S> inverse(const PoseT<S>& p) {
  Mat3<S> rt = p.rotation().transpose();
  return PoseT<S>::from_rt(rt, Vec3<S>(-rt * p.translation()));
}

/// Frobenius norm of the matrix difference; zero iff the poses are equal.
template <typename S>
S pose_error(const PoseT<S>& g, const PoseT<S>& a) {
  return (g.m - a.m).norm();
}

inline bool is_valid_pose(const Pose& p, double tol = 1e-9) {
  const Mat3d r = p.rotation();
  if ((r.transpose() * r - Mat3d::Identity()).norm() >= tol) return false;
  if (r.determinant() < 0.0) return false;
  Eigen::RowVector4d bottom = p.m.row(3);
  return (bottom - Eigen::RowVector4d(0, 0, 0, 1)).norm() < tol;
}

template <typename S>
PoseT<S> translation_pose(S x, S y, S z) {
  PoseT<S> p;
  p.m(0, 3) = x;
  p.m(1, 3) = y;
  p.m(2, 3) = z;
  return p;
}

template <typename S>
Mat3<S> rot_x(S a) {
  const S c = std::cos(a), s = std::sin(a);
  Mat3<S> r;
  r << S(1), S(0), S(0), S(0), c, -s, S(0), s, c;
  return r;
}

template <typename S>
Mat3<S> rot_y(S a) {
  const S c = std::cos(a), s = std::sin(a);
  Mat3<S> r;
  r << c, S(0), s, S(0), S(1), S(0), -s, S(0), c;
  return r;
}

template <typename S>
Mat3<S> rot_z(S a) {
  const S c = std::cos(a), s = std::sin(a);
  Mat3<S> r;
  r << c, -s, S(0), s, c, S(0), S(0), S(0), S(1);
  return r;
}

template <typename S>
PoseT<S> rot_pose_z(S a) {
  return PoseT<S>::from_rt(rot_z(a), Vec3<S>::Zero());
}

/// Minimal 6-DOF parametrization: translation plus extrinsic X-Y-Z Euler
/// angles (roll about x, then pitch about y, then yaw about z, all in the
/// fixed frame): R = Rz(yaw) * Ry(pitch) * Rx(roll). This convention is used
/// everywhere a pose is optimized or perturbed.
template <typename S>
struct Pose6T {
  Vec3<S> xyz = Vec3<S>::Zero();
  Vec3<S> rpy = Vec3<S>::Zero();

  Pose6T() = default;
  Pose6T(const Vec3<S>& xyz_, const Vec3<S>& rpy_) : xyz(xyz_), rpy(rpy_) {}
};

using Pose6 = Pose6T<double>;

template <typename S>
Mat3<S> rpy_to_rotation(const Vec3<S>& rpy) {
  return Mat3<S>(rot_z(rpy[2]) * rot_y(rpy[1]) * rot_x(rpy[0]));
}

template <typename S>
PoseT<S> to_pose(const Pose6T<S>& p6) {
  return PoseT<S>::from_rt(rpy_to_rotation(p6.rpy), p6.xyz);
}

/// Euler extraction; singular at pitch = ±π/2 (gimbal lock), callers keep
/// optimized poses away from that locus.
inline Pose6 from_pose(const Pose& p) {
  const Mat3d r = p.rotation();
  Pose6 out;
  out.xyz = p.translation();
  const double sp = std::clamp(-r(2, 0), -1.0, 1.0);
  out.rpy[1] = std::asin(sp);
  if (std::abs(sp) > 1.0 - 1e-12) {
    // Gimbal lock: roll/yaw indistinguishable, fold into roll.
    out.rpy[0] = std::atan2(-r(0, 1), r(1, 1));
    out.rpy[2] = 0.0;
  } else {
    out.rpy[0] = std::atan2(r(2, 1), r(2, 2));
    out.rpy[2] = std::atan2(r(1, 0), r(0, 0));
  }
  return out;
}

/// Derivatives of rpy_to_rotation with respect to roll, pitch, yaw.
inline std::array<Mat3d, 3> rpy_rotation_jacobian(const Eigen::Vector3d& rpy) {
  const double r = rpy[0], p = rpy[1], y = rpy[2];
  const double cr = std::cos(r), sr = std::sin(r);
  const double cp = std::cos(p), sp = std::sin(p);
  const double cy = std::cos(y), sy = std::sin(y);
  Mat3d rx = rot_x(r), ry = rot_y(p), rz = rot_z(y);
  Mat3d drx, dry, drz;
  drx << 0, 0, 0, 0, -sr, -cr, 0, cr, -sr;
  dry << -sp, 0, cp, 0, 0, 0, -cp, 0, -sp;
  drz << -sy, -cy, 0, cy, -sy, 0, 0, 0, 0;
  return {Mat3d(rz * ry * drx), Mat3d(rz * dry * rx), Mat3d(drz * ry * rx)};
}

/// d(to_pose)/d(component k): six 4x4 matrices ordered (x, y, z, roll,
/// pitch, yaw).
inline std::array<Mat4d, 6> pose6_jacobian(const Pose6& p6) {
  std::array<Mat4d, 6> out;
  for (auto& m : out) m.setZero();
  out[0](0, 3) = 1.0;
  out[1](1, 3) = 1.0;
  out[2](2, 3) = 1.0;
  const auto dr = rpy_rotation_jacobian(p6.rpy);
  for (int k = 0; k < 3; ++k) out[3 + k].block<3, 3>(0, 0) = dr[k];
  return out;
}

/// Similarity transform: x -> scale * (R x) + t with (R, t) from `transform`.
struct Sim3 {
  double scale = 1.0;
  Pose transform;

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const {
    return scale * (transform.rotation() * x) + transform.translation();
  }
};

inline Sim3 sim3_inverse(const Sim3& g) {
  Sim3 inv;
  inv.scale = 1.0 / g.scale;
  const Mat3d rt = g.transform.rotation().transpose();
  inv.transform = Pose::from_rt(rt, Eigen::Vector3d(-inv.scale * (rt * g.transform.translation())));
  return inv;
}

namespace detail {

inline void check_point_sets(const std::vector<Eigen::Vector3d>& src,
                             const std::vector<Eigen::Vector3d>& dst) {
  if (src.size() != dst.size())
    throw DimensionMismatch("point sets differ in size");
  if (src.size() < 3)
    throw DegenerateGeometry("need at least 3 point pairs");
}

}  // namespace detail

/// Least-squares rigid fit (centroid translation + SVD rotation with the
/// det(+1) correction): returns T minimizing sum ||T*src_i - dst_i||^2.
inline Pose rigid_fit(const std::vector<Eigen::Vector3d>& src,
                      const std::vector<Eigen::Vector3d>& dst) {
  detail::check_point_sets(src, dst);
  const int n = static_cast<int>(src.size());
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= n;
  cd /= n;
  Mat3d cov = Mat3d::Zero();
  for (int i = 0; i < n; ++i) cov += (dst[i] - cd) * (src[i] - cs).transpose();
  Eigen::JacobiSVD<Mat3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (sv(1) <= 1e-9 * std::max(sv(0), 1e-300))
    throw DegenerateGeometry("point set is collinear or rank deficient");
  Mat3d d = Mat3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3d r = svd.matrixU() * d * svd.matrixV().transpose();
  return Pose::from_rt(r, Eigen::Vector3d(cd - r * cs));
}

/// Similarity fit (Umeyama): minimizes sum ||s*R*src_i + t - dst_i||^2 over
/// s > 0 and rigid (R, t).
inline Sim3 sim3_fit(const std::vector<Eigen::Vector3d>& src,
                     const std::vector<Eigen::Vector3d>& dst) {
  detail::check_point_sets(src, dst);
  const int n = static_cast<int>(src.size());
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= n;
  cd /= n;
  Mat3d cov = Mat3d::Zero();
  double var_src = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d xs = src[i] - cs, xd = dst[i] - cd;
    cov += xd * xs.transpose();
    var_src += xs.squaredNorm();
  }
  cov /= n;
  var_src /= n;
  if (var_src <= 1e-18) throw DegenerateGeometry("source points are coincident");
  Eigen::JacobiSVD<Mat3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (sv(1) <= 1e-9 * std::max(sv(0), 1e-300))
    throw DegenerateGeometry("point set is collinear or rank deficient");
  Mat3d d = Mat3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3d r = svd.matrixU() * d * svd.matrixV().transpose();
  const double s = (sv.asDiagonal() * d).trace() / var_src;
  if (!(s > 0.0)) throw DegenerateGeometry("similarity fit produced non-positive scale");
  Sim3 g;
  g.scale = s;
  g.transform = Pose::from_rt(r, Eigen::Vector3d(cd - s * (r * cs)));
  return g;
}

}  // namespace viskin
