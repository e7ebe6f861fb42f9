#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <vector>

#include "viskin/geometry.hpp"

namespace viskin {

/// 3D coordinates of tracked features expressed in the end-effector frame;
/// column k holds feature id k.
struct Structure {
  Eigen::Matrix3Xd coords;

  int count() const { return static_cast<int>(coords.cols()); }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double px = 0.0;
  double py = 0.0;
};

/// Pinhole camera: intrinsics plus the extrinsic transform E (world frame to
/// camera frame, the inverse of the camera pose), parametrized as a Pose6.
struct CameraParams {
  Intrinsics intrinsics;
  Pose6 extrinsics;

  Pose extrinsic_pose() const { return to_pose(extrinsics); }
};

struct ImageBounds {
  double width = 640.0;
  double height = 480.0;

  static ImageBounds unbounded() {
    return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
};

/// Minimum camera-frame depth for a feature to count as visible.
inline constexpr double kVisibilityZMin = 1e-6;

struct PixelFeature {
  int id = 0;
  double u = 0.0;
  double v = 0.0;
};

/// Features seen by one camera, sorted by feature id.
using CameraObservation = std::vector<PixelFeature>;

/// Per-camera feature pixel coordinates; index = camera id. Missing features
/// are simply absent from the lists.
struct Observation {
  std::vector<CameraObservation> cams;

  int camera_count() const { return static_cast<int>(cams.size()); }
  int total_features() const {
    int n = 0;
    for (const auto& c : cams) n += static_cast<int>(c.size());
    return n;
  }
};

/// World coordinates of the features for end-effector pose P: column k is
/// P applied to structure column k.
inline Eigen::Matrix3Xd apply_structure(const Structure& f, const Pose& p) {
  return (p.rotation() * f.coords).colwise() + p.translation();
}

/// Pure pinhole projection of one camera-frame point, no visibility checks.
template <typename S>
Vec2<S> project_point(const Intrinsics& k, const Vec3<S>& cam_point) {
  return Vec2<S>(S(k.fx) * cam_point.x() / cam_point.z() + S(k.px),
                 S(k.fy) * cam_point.y() / cam_point.z() + S(k.py));
}

/// Projects world points into one camera, omitting features behind the
/// camera (z <= z_min) or outside the image bounds. Invisibility is
/// omission, not an error.
inline CameraObservation project(const CameraParams& cam, const Eigen::Matrix3Xd& world_points,
                                 const ImageBounds& bounds) {
  const Pose e = cam.extrinsic_pose();
  CameraObservation out;
  out.reserve(world_points.cols());
  for (int k = 0; k < world_points.cols(); ++k) {
    const Eigen::Vector3d q = e.apply(world_points.col(k));
    if (q.z() <= kVisibilityZMin) continue;
    const Eigen::Vector2d uv = project_point(cam.intrinsics, q);
    if (uv.x() < 0.0 || uv.x() > bounds.width || uv.y() < 0.0 || uv.y() > bounds.height)
      continue;
    out.push_back({k, uv.x(), uv.y()});
  }
  return out;
}

/// Projection formula applied to every feature regardless of visibility;
/// used inside losses so residuals stay smooth for features the model
/// currently predicts out of view.
inline CameraObservation project_all(const CameraParams& cam,
                                     const Eigen::Matrix3Xd& world_points) {
  const Pose e = cam.extrinsic_pose();
  CameraObservation out;
  out.reserve(world_points.cols());
  for (int k = 0; k < world_points.cols(); ++k) {
    const Eigen::Vector3d q = e.apply(world_points.col(k));
    const Eigen::Vector2d uv = project_point(cam.intrinsics, q);
    out.push_back({k, uv.x(), uv.y()});
  }
  return out;
}

/// Quadratic pixel error over the features present in `actual`; features
/// absent from `actual` contribute nothing. A feature observed in `actual`
/// with no generated counterpart signals an invisible-by-model mismatch.
inline double pixel_error(const CameraObservation& generated, const CameraObservation& actual) {
  double err = 0.0;
  for (const PixelFeature& obs : actual) {
    const auto it = std::find_if(generated.begin(), generated.end(),
                                 [&](const PixelFeature& g) { return g.id == obs.id; });
    if (it == generated.end())
      throw MissingGenerated("feature " + std::to_string(obs.id) + " observed but not generated");
    const double du = it->u - obs.u, dv = it->v - obs.v;
    err += du * du + dv * dv;
  }
  return err;
}

inline double pixel_error(const Observation& generated, const Observation& actual) {
  double err = 0.0;
  const int n = std::max(generated.camera_count(), actual.camera_count());
  for (int i = 0; i < n; ++i) {
    const bool has_actual = i < actual.camera_count() && !actual.cams[i].empty();
    if (!has_actual) continue;
    if (i >= generated.camera_count())
      throw MissingGenerated("camera " + std::to_string(i) + " has no generated view");
    err += pixel_error(generated.cams[i], actual.cams[i]);
  }
  return err;
}

/// Mean L2 pixel distance per feature present in `actual` (the evaluation
/// metric reported by experiments). Returns 0 when nothing is observed.
inline double average_pixel_norm(const Observation& generated, const Observation& actual) {
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < actual.camera_count(); ++i) {
    if (i >= generated.camera_count()) throw MissingGenerated("camera view missing");
    for (const PixelFeature& obs : actual.cams[i]) {
      const auto& gen = generated.cams[i];
      const auto it = std::find_if(gen.begin(), gen.end(),
                                   [&](const PixelFeature& g) { return g.id == obs.id; });
      if (it == gen.end()) throw MissingGenerated("feature missing from generated view");
      total += std::hypot(it->u - obs.u, it->v - obs.v);
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

struct Ray {
  CameraParams camera;
  double u = 0.0;
  double v = 0.0;
};

/// Linear least-squares (midpoint) triangulation of one 3D point from two or
/// more rays.
inline Eigen::Vector3d triangulate(const std::vector<Ray>& rays) {
  if (rays.size() < 2) throw DegenerateGeometry("triangulation needs at least 2 rays");
  std::vector<Eigen::Vector3d> centers, dirs;
  centers.reserve(rays.size());
  dirs.reserve(rays.size());
  for (const Ray& r : rays) {
    const Pose e = r.camera.extrinsic_pose();
    const Mat3d rt = e.rotation().transpose();
    centers.push_back(-rt * e.translation());
    Eigen::Vector3d d((r.u - r.camera.intrinsics.px) / r.camera.intrinsics.fx,
                      (r.v - r.camera.intrinsics.py) / r.camera.intrinsics.fy, 1.0);
    dirs.push_back((rt * d).normalized());
  }
  double max_center_dist = 0.0;
  for (size_t i = 0; i < centers.size(); ++i)
    for (size_t k = i + 1; k < centers.size(); ++k)
      max_center_dist = std::max(max_center_dist, (centers[i] - centers[k]).norm());
  if (max_center_dist < 1e-12)
    throw DegenerateGeometry("camera centers coincide");
  Mat3d a = Mat3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < dirs.size(); ++i) {
    const Mat3d proj = Mat3d::Identity() - dirs[i] * dirs[i].transpose();
    a += proj;
    b += proj * centers[i];
  }
  Eigen::SelfAdjointEigenSolver<Mat3d> eig(a);
  const Eigen::Vector3d ev = eig.eigenvalues();
  if (ev(0) <= 1e-9 * std::max(ev(2), 1e-300))
    throw DegenerateGeometry("rays are parallel");
  return a.ldlt().solve(b);
}

}  // namespace viskin
