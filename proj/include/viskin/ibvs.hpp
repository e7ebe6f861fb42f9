#pragma once

#include <vector>

#include "viskin/kinematics.hpp"
#include "viskin/scene.hpp"

namespace viskin {

/// Tracked feature for the classic IBVS control law: pixel coordinates plus
/// camera-frame depth.
struct IbvsFeature {
  int id = 0;
  double u = 0.0;
  double v = 0.0;
  double z = 0.0;
};

struct IbvsConfig {
  double gamma = 0.5;
  // The error vector carries the camera-frame depth alongside the pixel
  // coordinates; the pixel-only variant is kept as an option.
  bool include_depth = true;
  double condition_limit = 1e12;
};

/// 2k x 6 point-feature interaction matrix (pixel velocity per camera-frame
/// twist), rows paired (u, v) per feature, evaluated at the normalized image
/// coordinates with the given depths.
Eigen::MatrixXd interaction_matrix(const std::vector<IbvsFeature>& features,
                                   const Intrinsics& intrinsics);

struct IbvsCommand {
  JointVector qdot;
  bool rank_deficient = false;
  double condition = 0.0;
};

/// One step of the eye-to-hand control law
///   qdot = gamma * (L cVe eJe)^+ e
/// with the Moore-Penrose pseudoinverse. `hand_eye` is the transform from
/// the end-effector frame to the camera frame; `jacobian` is the robot
/// Jacobian expressed in the end-effector frame. A condition number past the
/// limit is flagged but the command is still returned.
IbvsCommand ibvs_step(const std::vector<IbvsFeature>& current,
                      const std::vector<IbvsFeature>& target, const Intrinsics& intrinsics,
                      const Eigen::Matrix<double, 6, Eigen::Dynamic>& jacobian,
                      const Pose& hand_eye, const IbvsConfig& cfg = {});

/// 6x6 twist transform from the end-effector frame to the camera frame for
/// the given hand-eye pose.
Eigen::Matrix<double, 6, 6> twist_transform(const Pose& hand_eye);

}  // namespace viskin
