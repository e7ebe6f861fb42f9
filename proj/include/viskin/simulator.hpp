#pragma once

#include <optional>
#include <string>
#include <vector>

#include "viskin/kinematics.hpp"
#include "viskin/model.hpp"
#include "viskin/rng.hpp"
#include "viskin/scene.hpp"

namespace viskin {

/// Standard deviations of the injected noise. Joint sigmas are radians,
/// Cartesian translation sigma is world units, rpy sigma radians.
struct NoiseConfig {
  double joint_read_sigma = 0.0;
  double joint_action_sigma = 0.0;
  double cart_action_sigma_t = 0.0;
  double cart_action_sigma_rpy = 0.0;
  double pose_read_sigma = 0.0;
};

/// Ground-truth world: the oracle every learning result is validated
/// against. Immutable after construction.
struct GroundTruthWorld {
  KinematicParams kin;
  Structure structure;
  std::vector<CameraParams> cameras;
  ImageBounds bounds;
  NoiseConfig noise;
  uint64_t seed = 0;

  JointVector home() const { return JointVector::Zero(kin.dof()); }
};

/// The world's true parameters as a model; the reference every learned
/// model is scored against.
inline ModelParams ground_truth_model(const GroundTruthWorld& w) {
  return ModelParams{w.kin, w.structure, w.cameras};
}

/// Data-collection regimes; field presence in the records follows the
/// regime (see Dataset serialization).
enum class Regime { kJoints, kNoisyJoints, kJointActions, kCartActions, kNoisyPose };

std::string regime_name(Regime r);
Regime regime_from_name(const std::string& name);

struct DatasetRecord {
  int t = 0;
  std::optional<JointVector> joints;
  std::optional<JointVector> noisy_joints;
  std::optional<JointVector> joint_action;
  std::optional<Pose6> cart_action;
  std::optional<Pose6> noisy_pose;
  Observation observation;
};

struct Dataset {
  int schema_version = 1;
  std::string world_id;
  Regime regime = Regime::kJoints;
  std::vector<DatasetRecord> records;

  int size() const { return static_cast<int>(records.size()); }
  int camera_count() const;
};

/// Deterministic per seed: a 6-DOF arm with no adjacent parallel axes, two
/// cameras about 1.5 units out looking at the workspace, and 12 features
/// within 0.1 units of the end-effector, regenerated until all features are
/// visible in both cameras at the home configuration.
GroundTruthWorld make_default_world(uint64_t seed, const NoiseConfig& noise = {});

/// Camera at `position` aimed at `target` with image "up" along world +z.
CameraParams make_lookat_camera(const Eigen::Vector3d& position, const Eigen::Vector3d& target,
                                const Intrinsics& intrinsics);

/// Ground-truth generative chain with visibility filtering; pixels carry no
/// noise.
Observation capture(const GroundTruthWorld& world, const JointVector& j);

/// Random-motion data collection. State regimes draw i.i.d. uniform
/// configurations; action regimes run a random walk through the noisy
/// controller starting from the home configuration, recording only actions
/// and observations.
Dataset collect_random_dataset(const GroundTruthWorld& world, int samples, Regime regime,
                               uint64_t seed);

struct PlantState {
  JointVector joints;
};

/// One noisy controller step. Joint actions: j <- j + a + eps. Cartesian
/// actions: the commanded transform (with noise on its Euler coordinates)
/// is realized through IK on the ground-truth model.
Observation step(const GroundTruthWorld& world, PlantState& state, const JointVector& joint_delta,
                 Rng& rng);
Observation step(const GroundTruthWorld& world, PlantState& state, const Pose6& cart_action,
                 Rng& rng);

/// Caller-owned stateful wrapper used by the servo loops.
class SimulatedPlant {
 public:
  SimulatedPlant(const GroundTruthWorld& world, const JointVector& start, uint64_t seed)
      : world_(world), state_{start}, rng_(seed) {}

  Observation observe() const { return capture(world_, state_.joints); }
  Observation command_joint_delta(const JointVector& dq) { return step(world_, state_, dq, rng_); }
  Observation command_cartesian(const Pose6& action) { return step(world_, state_, action, rng_); }

  const JointVector& joints() const { return state_.joints; }  // oracle access for experiments
  const GroundTruthWorld& world() const { return world_; }

 private:
  const GroundTruthWorld& world_;
  PlantState state_;
  Rng rng_;
};

/// Ground-truth IK used by the Cartesian controller; returns nullopt when
/// the target is unreachable within tolerance.
std::optional<JointVector> ground_truth_ik(const GroundTruthWorld& world, const Pose& target,
                                           const JointVector& seed_joints, double tol = 1e-6);

}  // namespace viskin
