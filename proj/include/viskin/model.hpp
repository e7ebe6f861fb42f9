#pragma once

#include <vector>

#include "viskin/kinematics.hpp"
#include "viskin/scene.hpp"

namespace viskin {

/// The full learnable parameter pack: kinematics R (base + DH rows),
/// structure F, and intrinsics + extrinsics V per camera.
struct ModelParams {
  KinematicParams kin;
  Structure structure;
  std::vector<CameraParams> cameras;

  int camera_count() const { return static_cast<int>(cameras.size()); }
  /// 6 + 4n + 3m + 10c.
  int parameter_count() const {
    return 6 + 4 * kin.dof() + 3 * structure.count() + 10 * camera_count();
  }
};

/// Applies a global similarity gauge to the model: the world is scaled by
/// g.scale and rigidly moved by g.transform, leaving every generated pixel
/// unchanged. Concretely: base <- g o base with DH translations (a, d) and
/// structure scaled by s; camera rotations composed with the gauge rotation
/// and camera translations rescaled to keep camera-frame points at s times
/// their previous value (pixels are invariant to that uniform scaling).
inline ModelParams apply_gauge(const ModelParams& model, const Sim3& g) {
  ModelParams out = model;
  const Mat3d rg = g.transform.rotation();
  const Eigen::Vector3d tg = g.transform.translation();
  const double s = g.scale;

  const Pose base = to_pose(model.kin.base);
  out.kin.base = from_pose(Pose::from_rt(Mat3d(rg * base.rotation()),
                                         Eigen::Vector3d(s * (rg * base.translation()) + tg)));
  for (DHRow& row : out.kin.rows) {
    row.a *= s;
    row.d *= s;
  }
  out.structure.coords = s * model.structure.coords;
  for (CameraParams& cam : out.cameras) {
    const Pose e = to_pose(cam.extrinsics);
    const Mat3d r_new = e.rotation() * rg.transpose();
    const Eigen::Vector3d t_new = s * e.translation() - r_new * tg;
    cam.extrinsics = from_pose(Pose::from_rt(r_new, t_new));
  }
  return out;
}

/// Gauge action on a world-frame pose (e.g. latent end-effector poses).
inline Pose apply_gauge_to_pose(const Pose& p, const Sim3& g) {
  const Mat3d rg = g.transform.rotation();
  return Pose::from_rt(Mat3d(rg * p.rotation()),
                       Eigen::Vector3d(g.scale * (rg * p.translation()) + g.transform.translation()));
}

/// Generated pixels for a joint configuration through the full chain
/// (kinematics, structure, cameras), visibility-filtered.
inline Observation generate_observation(const ModelParams& model, const JointVector& j,
                                        const ImageBounds& bounds) {
  const Pose p = forward_kinematics(model.kin, j);
  const Eigen::Matrix3Xd m = apply_structure(model.structure, p);
  Observation obs;
  obs.cams.reserve(model.cameras.size());
  for (const CameraParams& cam : model.cameras) obs.cams.push_back(project(cam, m, bounds));
  return obs;
}

/// Same chain with the projection formula applied to every feature (no
/// visibility filtering); the form used inside losses.
inline Observation generate_observation_all(const ModelParams& model, const JointVector& j) {
  const Pose p = forward_kinematics(model.kin, j);
  const Eigen::Matrix3Xd m = apply_structure(model.structure, p);
  Observation obs;
  obs.cams.reserve(model.cameras.size());
  for (const CameraParams& cam : model.cameras) obs.cams.push_back(project_all(cam, m));
  return obs;
}

}  // namespace viskin
