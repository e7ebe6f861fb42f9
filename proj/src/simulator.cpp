#include "viskin/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace viskin {

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kJoints: return "joints";
    case Regime::kNoisyJoints: return "noisy_joints";
    case Regime::kJointActions: return "joint_actions";
    case Regime::kCartActions: return "cart_actions";
    case Regime::kNoisyPose: return "noisy_pose";
  }
  return "joints";
}

Regime regime_from_name(const std::string& name) {
  if (name == "joints") return Regime::kJoints;
  if (name == "noisy_joints") return Regime::kNoisyJoints;
  if (name == "joint_actions") return Regime::kJointActions;
  if (name == "cart_actions") return Regime::kCartActions;
  if (name == "noisy_pose") return Regime::kNoisyPose;
  throw UsageError("unknown regime: " + name);
}

int Dataset::camera_count() const {
  int n = 0;
  for (const auto& r : records) n = std::max(n, r.observation.camera_count());
  return n;
}

CameraParams make_lookat_camera(const Eigen::Vector3d& position, const Eigen::Vector3d& target,
                                const Intrinsics& intrinsics) {
  // Camera frame: z forward into the scene, y down (pixel v grows downward).
  const Eigen::Vector3d z = (target - position).normalized();
  Eigen::Vector3d y0 = -Eigen::Vector3d::UnitZ();
  y0 = (y0 - y0.dot(z) * z).normalized();
  const Eigen::Vector3d x = y0.cross(z).normalized();
  Mat3d cam_to_world;
  cam_to_world.col(0) = x;
  cam_to_world.col(1) = y0;
  cam_to_world.col(2) = z;
  const Mat3d r_e = cam_to_world.transpose();
  CameraParams cam;
  cam.intrinsics = intrinsics;
  cam.extrinsics = from_pose(Pose::from_rt(r_e, Eigen::Vector3d(-r_e * position)));
  return cam;
}

Observation capture(const GroundTruthWorld& world, const JointVector& j) {
  const Pose p = forward_kinematics(world.kin, j);
  const Eigen::Matrix3Xd m = apply_structure(world.structure, p);
  Observation obs;
  obs.cams.reserve(world.cameras.size());
  for (const CameraParams& cam : world.cameras) obs.cams.push_back(project(cam, m, world.bounds));
  return obs;
}

namespace {

Eigen::Vector3d random_in_ball(Rng& rng, double radius) {
  while (true) {
    Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (p.squaredNorm() <= 1.0) return p * radius;
  }
}

CameraParams random_camera_looking_at(Rng& rng, const Eigen::Vector3d& target, double azimuth) {
  const double elevation = rng.uniform(0.15 * M_PI, 0.35 * M_PI);
  const double dist = rng.uniform(1.3, 1.7);
  const Eigen::Vector3d dir(std::cos(elevation) * std::cos(azimuth),
                            std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
  const Eigen::Vector3d pos = target + dist * dir;
  const double f = 600.0 * rng.uniform(0.97, 1.03);
  const Intrinsics k{f, f, 320.0 * rng.uniform(0.98, 1.02), 240.0 * rng.uniform(0.98, 1.02)};
  return make_lookat_camera(pos, target, k);
}

int shared_feature_count(const Observation& obs, int cam_a, int cam_b) {
  if (obs.camera_count() <= std::max(cam_a, cam_b)) return 0;
  int shared = 0;
  for (const PixelFeature& f : obs.cams[cam_a]) {
    for (const PixelFeature& g : obs.cams[cam_b])
      if (g.id == f.id) {
        ++shared;
        break;
      }
  }
  return shared;
}

}  // namespace

GroundTruthWorld make_default_world(uint64_t seed, const NoiseConfig& noise) {
  Rng rng = Rng(seed).fork(0x7751d5);
  constexpr int kDof = 6;
  constexpr int kFeatures = 12;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    GroundTruthWorld w;
    w.seed = seed;
    w.noise = noise;
    w.bounds = ImageBounds{640.0, 480.0};
    w.kin.base.xyz = Eigen::Vector3d(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                     rng.uniform(-0.2, 0.2));
    w.kin.base.rpy = Eigen::Vector3d(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                     rng.uniform(-0.3, 0.3));
    w.kin.rows.resize(kDof);
    for (DHRow& row : w.kin.rows) {
      row.omega = rng.uniform(-M_PI, M_PI);
      row.d = rng.uniform(0.1, 0.35) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
      row.a = rng.uniform(0.1, 0.35) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
      // Twist near +-pi/2 keeps adjacent joint axes far from parallel.
      row.alpha = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(M_PI / 2 - 0.45, M_PI / 2 + 0.45);
    }
    bool parallel = false;
    for (const DHRow& row : w.kin.rows)
      if (std::abs(std::sin(row.alpha)) < 0.3) parallel = true;
    if (parallel) continue;

    w.structure.coords.resize(3, kFeatures);
    for (int k = 0; k < kFeatures; ++k) w.structure.coords.col(k) = random_in_ball(rng, 0.1);

    const Pose home_pose = forward_kinematics(w.kin, w.home());
    const Eigen::Matrix3Xd home_points = apply_structure(w.structure, home_pose);
    const Eigen::Vector3d center = home_points.rowwise().mean();

    const double az0 = rng.uniform(0.0, 2.0 * M_PI);
    const double az1 = az0 + rng.uniform(0.4 * M_PI, 0.6 * M_PI);
    w.cameras.push_back(random_camera_looking_at(rng, center, az0));
    w.cameras.push_back(random_camera_looking_at(rng, center, az1));

    const Observation home_obs = capture(w, w.home());
    bool all_visible = true;
    for (const auto& cam_obs : home_obs.cams)
      if (static_cast<int>(cam_obs.size()) != kFeatures) all_visible = false;
    if (!all_visible) continue;
    return w;
  }
  throw std::logic_error("default world generation did not converge");
}

std::optional<JointVector> ground_truth_ik(const GroundTruthWorld& world, const Pose& target,
                                           const JointVector& seed_joints, double tol) {
  return ik_solve(world.kin, target, seed_joints, tol);
}

Observation step(const GroundTruthWorld& world, PlantState& state, const JointVector& joint_delta,
                 Rng& rng) {
  if (joint_delta.size() != world.kin.dof())
    throw DimensionMismatch("joint action has wrong dimension");
  JointVector noise = JointVector::Zero(joint_delta.size());
  for (int i = 0; i < noise.size(); ++i) noise[i] = rng.normal(0.0, world.noise.joint_action_sigma);
  state.joints = state.joints + joint_delta + noise;
  return capture(world, state.joints);
}

Observation step(const GroundTruthWorld& world, PlantState& state, const Pose6& cart_action,
                 Rng& rng) {
  Pose6 noisy = cart_action;
  for (int i = 0; i < 3; ++i) {
    noisy.xyz[i] += rng.normal(0.0, world.noise.cart_action_sigma_t);
    noisy.rpy[i] += rng.normal(0.0, world.noise.cart_action_sigma_rpy);
  }
  const Pose current = forward_kinematics(world.kin, state.joints);
  const Pose target = compose(to_pose(noisy), current);
  const auto solution = ground_truth_ik(world, target, state.joints);
  if (!solution) throw UnreachableTarget("cartesian controller could not reach the commanded pose");
  state.joints = *solution;
  return capture(world, state.joints);
}

namespace {

JointVector sample_config(const GroundTruthWorld& world, Rng& rng) {
  JointVector j(world.kin.dof());
  for (int i = 0; i < j.size(); ++i)
    j[i] = std::clamp(rng.uniform(-M_PI / 2, M_PI / 2), -M_PI, M_PI);
  return j;
}

// A record is worth keeping when the two default cameras still share enough
// features to anchor two-view geometry.
bool acceptable_observation(const Observation& obs) {
  return shared_feature_count(obs, 0, 1) >= 8;
}

bool dataset_guarantee_holds(const Dataset& data, int feature_count) {
  if (data.size() < 10) return true;  // tiny sets cannot meet the coverage rule
  std::vector<int> multiview_timesteps(feature_count, 0);
  for (const DatasetRecord& rec : data.records) {
    for (int k = 0; k < feature_count; ++k) {
      int cams_seeing = 0;
      for (const auto& cam_obs : rec.observation.cams)
        for (const PixelFeature& f : cam_obs)
          if (f.id == k) {
            ++cams_seeing;
            break;
          }
      if (cams_seeing >= 2) ++multiview_timesteps[k];
    }
  }
  for (int k = 0; k < feature_count; ++k)
    if (multiview_timesteps[k] < 5) return false;
  int shared_total = 0;
  for (const DatasetRecord& rec : data.records)
    shared_total += shared_feature_count(rec.observation, 0, 1);
  return shared_total >= 8;
}

Pose6 sample_cart_action(Rng& rng) {
  Pose6 a;
  a.xyz = Eigen::Vector3d(rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04),
                          rng.uniform(-0.04, 0.04));
  a.rpy = Eigen::Vector3d(rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                          rng.uniform(-0.08, 0.08));
  return a;
}

}  // namespace

Dataset collect_random_dataset(const GroundTruthWorld& world, int samples, Regime regime,
                               uint64_t seed) {
  if (samples < 1) throw UsageError("dataset needs at least one sample");
  Rng rng = Rng(seed).fork(0xda7a);
  Dataset data;
  data.world_id = "default-" + std::to_string(world.seed);
  data.regime = regime;

  for (int attempt = 0; attempt < 64; ++attempt) {
    data.records.clear();
    data.records.reserve(samples);
    bool walk_ok = true;

    if (regime == Regime::kJoints || regime == Regime::kNoisyJoints ||
        regime == Regime::kNoisyPose) {
      for (int t = 0; t < samples; ++t) {
        DatasetRecord rec;
        rec.t = t;
        JointVector j;
        Observation obs;
        bool found = false;
        for (int tries = 0; tries < 200; ++tries) {
          j = sample_config(world, rng);
          obs = capture(world, j);
          if (acceptable_observation(obs)) {
            found = true;
            break;
          }
        }
        if (!found) {
          walk_ok = false;
          break;
        }
        rec.observation = obs;
        if (regime == Regime::kJoints) {
          rec.joints = j;
          JointVector noisy = j;
          for (int i = 0; i < noisy.size(); ++i)
            noisy[i] += rng.normal(0.0, world.noise.joint_read_sigma);
          rec.noisy_joints = noisy;
        } else if (regime == Regime::kNoisyJoints) {
          JointVector noisy = j;
          for (int i = 0; i < noisy.size(); ++i)
            noisy[i] += rng.normal(0.0, world.noise.joint_read_sigma);
          rec.noisy_joints = noisy;
        } else {
          Pose6 p6 = from_pose(forward_kinematics(world.kin, j));
          for (int i = 0; i < 3; ++i) {
            p6.xyz[i] += rng.normal(0.0, world.noise.pose_read_sigma);
            p6.rpy[i] += rng.normal(0.0, world.noise.pose_read_sigma);
          }
          rec.noisy_pose = p6;
        }
        data.records.push_back(std::move(rec));
      }
    } else if (regime == Regime::kJointActions) {
      PlantState state{world.home()};
      for (int t = 0; t < samples && walk_ok; ++t) {
        DatasetRecord rec;
        rec.t = t;
        rec.observation = capture(world, state.joints);
        if (t + 1 < samples) {
          bool stepped = false;
          for (int tries = 0; tries < 100; ++tries) {
            JointVector a(world.kin.dof());
            for (int i = 0; i < a.size(); ++i) {
              a[i] = rng.uniform(-0.15, 0.15);
              // Reflect steps that would leave the visible envelope.
              if (std::abs(state.joints[i] + a[i]) > M_PI / 2) a[i] = -a[i];
            }
            PlantState trial = state;
            const Observation next_obs = step(world, trial, a, rng);
            if (acceptable_observation(next_obs)) {
              rec.joint_action = a;
              state = trial;
              stepped = true;
              break;
            }
          }
          if (!stepped) walk_ok = false;
        }
        data.records.push_back(std::move(rec));
      }
    } else {  // cart_actions
      PlantState state{world.home()};
      for (int t = 0; t < samples && walk_ok; ++t) {
        DatasetRecord rec;
        rec.t = t;
        rec.observation = capture(world, state.joints);
        if (t + 1 < samples) {
          bool stepped = false;
          for (int tries = 0; tries < 100; ++tries) {
            const Pose6 a = sample_cart_action(rng);
            PlantState trial = state;
            try {
              const Observation next_obs = step(world, trial, a, rng);
              if (!acceptable_observation(next_obs)) continue;
              rec.cart_action = a;
              state = trial;
              stepped = true;
              break;
            } catch (const UnreachableTarget&) {
              continue;
            }
          }
          if (!stepped) walk_ok = false;
        }
        data.records.push_back(std::move(rec));
      }
    }

    if (walk_ok && static_cast<int>(data.records.size()) == samples &&
        dataset_guarantee_holds(data, world.structure.count()))
      return data;
  }
  throw std::logic_error("dataset collection did not satisfy the coverage guarantee");
}

}  // namespace viskin
