#pragma once

#include <map>
#include <optional>
#include <vector>

#include "viskin/learning.hpp"
#include "viskin/simulator.hpp"

namespace viskin {

struct Correspondence {
  double u1 = 0.0, v1 = 0.0;  // pixel in the first view
  double u2 = 0.0, v2 = 0.0;  // pixel in the second view
};

/// Bootstrap output: a partial end-effector trajectory (timesteps that could
/// not be chained stay absent), camera estimates (cameras that never share
/// enough features stay absent), and, on the SfM path, the discovered
/// structure.
struct InitEstimate {
  std::vector<std::optional<Pose>> poses;
  std::vector<std::optional<CameraParams>> cameras;
  std::optional<Structure> structure;
  std::vector<int> covered_timesteps;
  // RMS spread of the triangulated feature clouds around their centroids, in
  // the bootstrap gauge; sets the scale of the random structure init.
  double feature_spread = 0.1;
};

/// Relative pose of the second view with respect to the first (unit-norm
/// translation) from >= 8 pixel correspondences: normalized eight-point
/// essential estimation with Hartley conditioning, rank-2 projection, and
/// cheirality-based disambiguation of the four decompositions.
Pose estimate_relative_pose(const std::vector<Correspondence>& corr, const Intrinsics& k1,
                            const Intrinsics& k2);

/// Chains per-timestep triangulated feature clouds into an end-effector
/// trajectory: the best-covered timestep is anchored at identity and
/// remaining timesteps are attached greedily by shared-feature count through
/// least-squares rigid fits. Timesteps sharing fewer than 3 features with
/// every covered timestep stay absent.
std::vector<std::optional<Pose>> chain_pose_trajectory(
    const std::vector<std::map<int, Eigen::Vector3d>>& clouds);

/// Two-view (or more) initialization: camera chain from pairwise essential
/// estimates, feature triangulation per timestep, trajectory chaining.
/// Structure is left for a random downstream initialization.
InitEstimate init_by_triangulation(const Dataset& data, const std::vector<Intrinsics>& guess);

/// Single-camera incremental structure-from-motion initialization. The
/// restart index selects the seed view pair (pairs ranked by shared-feature
/// count times median pixel displacement).
InitEstimate init_by_sfm(const Dataset& data, const Intrinsics& guess, int restart = 0);

/// Nonlinear reprojection fit of a pose against known 3D points seen by one
/// or more cameras; the workhorse behind SfM registration and PnP.
/// `observed` holds, per camera, the observed pixels of `points` columns
/// (matched by index). Returns the refined pose and its summed squared
/// residual.
std::pair<Pose, double> fit_pose_to_points(const std::vector<CameraParams>& cameras,
                                           const std::vector<CameraObservation>& observed,
                                           const Eigen::Matrix3Xd& points, const Pose6& init,
                                           int iterations = 100);

}  // namespace viskin
