#include "viskin/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace viskin {

namespace {

// Structure points actually observed, for the well-posedness checks.
std::vector<int> observed_feature_ids(const Observation& obs) {
  std::set<int> ids;
  for (const auto& cam_obs : obs.cams)
    for (const PixelFeature& f : cam_obs) ids.insert(f.id);
  return {ids.begin(), ids.end()};
}

bool points_near_collinear(const Structure& structure, const std::vector<int>& ids) {
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (int id : ids) centroid += structure.coords.col(id);
  centroid /= static_cast<double>(ids.size());
  Mat3d scatter = Mat3d::Zero();
  for (int id : ids) {
    const Eigen::Vector3d d = structure.coords.col(id) - centroid;
    scatter += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3d> eig(scatter);
  const Eigen::Vector3d ev = eig.eigenvalues();
  return ev(1) <= 1e-6 * std::max(ev(2), 1e-300);
}

// One nonlinear reprojection fit of the pose from a given initialization.
std::pair<Pose, double> refine_pose(const ModelParams& model, const Observation& obs,
                                    const Pose6& init, int iterations) {
  TrainingData td;
  td.camera_count = model.camera_count();
  td.observations.push_back(obs);
  Latents latents;
  latents.poses.push_back(init);
  FreeVariables mask = FreeVariables::none(model.camera_count());
  mask.latent_poses = true;
  OptimizerConfig cfg;
  cfg.max_iterations = iterations;
  const MinimizeResult res =
      minimize({LossVariant::kCam, 0.0}, mask, model, latents, td, {0}, cfg, 0);
  return {to_pose(res.latents.poses[0]), res.final_loss};
}

Mat3d random_rotation(Rng& rng) {
  const Eigen::Vector3d axis =
      Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
  return Eigen::AngleAxisd(rng.uniform(0.0, M_PI), axis).toRotationMatrix();
}

}  // namespace

Pose infer_pose_from_image(const ModelParams& model, const Observation& obs,
                           const PnpOptions& opt, const Pose* warm_start) {
  const std::vector<int> ids = observed_feature_ids(obs);
  if (static_cast<int>(ids.size()) < 4)
    throw InsufficientFeatures("pose inference needs at least 4 distinct features, have " +
                               std::to_string(ids.size()));
  if (points_near_collinear(model.structure, ids))
    throw InsufficientFeatures("observed features are collinear");

  const int n_residuals = 2 * obs.total_features();
  auto avg_residual = [&](double loss) { return std::sqrt(loss / std::max(1, n_residuals)); };

  Pose best_pose;
  double best_loss = std::numeric_limits<double>::infinity();
  if (warm_start != nullptr) {
    const auto [pose, loss] = refine_pose(model, obs, from_pose(*warm_start), opt.max_iterations);
    best_pose = pose;
    best_loss = loss;
    // A warm start that lands sub-pixel is the tracked optimum; skip the
    // cold multi-start.
    if (avg_residual(best_loss) < 2.0) return best_pose;
  }

  // Translation init: intersect the per-camera mean-pixel rays (two or more
  // cameras), or back off to an apparent-size depth estimate for one camera.
  Eigen::Vector3d t0 = Eigen::Vector3d::Zero();
  {
    std::vector<Ray> mean_rays;
    for (int i = 0; i < obs.camera_count() && i < model.camera_count(); ++i) {
      if (obs.cams[i].empty()) continue;
      double mu = 0.0, mv = 0.0;
      for (const PixelFeature& f : obs.cams[i]) {
        mu += f.u;
        mv += f.v;
      }
      mu /= obs.cams[i].size();
      mv /= obs.cams[i].size();
      mean_rays.push_back({model.cameras[i], mu, mv});
    }
    bool have_t0 = false;
    if (mean_rays.size() >= 2) {
      try {
        t0 = triangulate(mean_rays);
        have_t0 = true;
      } catch (const DegenerateGeometry&) {
      }
    }
    if (!have_t0 && !mean_rays.empty()) {
      // Monocular: depth from apparent size of the feature cloud.
      const Ray& r = mean_rays.front();
      int cam_id = 0;
      for (int i = 0; i < obs.camera_count(); ++i)
        if (!obs.cams[i].empty()) {
          cam_id = i;
          break;
        }
      double pixel_spread = 0.0;
      for (const PixelFeature& f : obs.cams[cam_id])
        pixel_spread += std::hypot(f.u - r.u, f.v - r.v);
      pixel_spread /= obs.cams[cam_id].size();
      Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
      for (int id : ids) centroid += model.structure.coords.col(id);
      centroid /= static_cast<double>(ids.size());
      double spread3d = 0.0;
      for (int id : ids) spread3d += (model.structure.coords.col(id) - centroid).norm();
      spread3d /= static_cast<double>(ids.size());
      const double depth = std::max(0.1, r.camera.intrinsics.fx * spread3d /
                                             std::max(pixel_spread, 1e-6));
      const Pose e = r.camera.extrinsic_pose();
      const Mat3d rt = e.rotation().transpose();
      const Eigen::Vector3d center = -rt * e.translation();
      const Eigen::Vector3d dir =
          (rt * Eigen::Vector3d((r.u - r.camera.intrinsics.px) / r.camera.intrinsics.fx,
                                (r.v - r.camera.intrinsics.py) / r.camera.intrinsics.fy, 1.0))
              .normalized();
      t0 = center + depth * dir;
    }
  }

  Rng rng(mix_seed(opt.seed, 0x9a9));
  for (int k = 0; k < opt.cold_starts; ++k) {
    Pose6 init = from_pose(Pose::from_rt(random_rotation(rng), t0));
    const auto [pose, loss] = refine_pose(model, obs, init, opt.max_iterations);
    if (loss < best_loss) {
      best_loss = loss;
      best_pose = pose;
    }
  }
  if (avg_residual(best_loss) > opt.max_avg_residual_px)
    throw ConvergenceFailure("pose inference residual " + std::to_string(avg_residual(best_loss)) +
                             " px exceeds tolerance");
  return best_pose;
}

std::vector<JointVector> default_ik_seeds(int dof, int count, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x1c5eed));
  std::vector<JointVector> seeds(count, JointVector::Zero(dof));
  for (JointVector& s : seeds)
    for (int i = 0; i < dof; ++i) s[i] = rng.uniform(-M_PI, M_PI);
  return seeds;
}

std::vector<JointVector> infer_joints_from_pose(const ModelParams& model, const Pose& target,
                                                const std::vector<JointVector>& seeds,
                                                const IkOptions& opt) {
  if (seeds.empty()) throw UsageError("IK needs at least one seed");
  struct Solution {
    JointVector j;
    double residual;
  };
  std::vector<Solution> solutions;
  for (const JointVector& seed : seeds) {
    const auto j = ik_solve(model.kin, target, seed, opt.residual_tol, opt.max_iterations);
    if (!j) continue;
    const double residual = pose_error(forward_kinematics(model.kin, *j), target);
    bool duplicate = false;
    for (Solution& s : solutions) {
      double max_diff = 0.0;
      for (int i = 0; i < j->size(); ++i)
        max_diff = std::max(max_diff, std::abs(std::remainder((*j)[i] - s.j[i], 2.0 * M_PI)));
      if (max_diff < opt.dedup_tol) {
        if (residual < s.residual) s = {*j, residual};
        duplicate = true;
        break;
      }
    }
    if (!duplicate) solutions.push_back({*j, residual});
  }
  std::stable_sort(solutions.begin(), solutions.end(),
                   [](const Solution& a, const Solution& b) { return a.residual < b.residual; });
  std::vector<JointVector> out;
  out.reserve(solutions.size());
  for (const Solution& s : solutions) out.push_back(s.j);
  return out;
}

JointVector select_joint_solution(const std::vector<JointVector>& solutions,
                                  const std::vector<JointVector>& action_history,
                                  const JointVector& j_prev_estimate) {
  if (solutions.empty()) throw EmptySolutionSet("no joint solutions to select from");
  JointVector predicted = j_prev_estimate;
  if (!action_history.empty()) predicted += action_history.back();
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < solutions.size(); ++i) {
    const double d = joint_error(solutions[i], predicted);
    if (d < best_dist) {
      best_dist = d;
      best = static_cast<int>(i);
    }
  }
  return solutions[best];
}

std::pair<JointVector, double> refine_joints_on_image(const ModelParams& model,
                                                      const Observation& obs,
                                                      const JointVector& seed,
                                                      int iterations) {
  TrainingData td;
  td.camera_count = model.camera_count();
  td.observations.push_back(obs);
  td.joints_obs.push_back(seed);
  Latents latents;
  latents.joints.push_back(seed);
  FreeVariables mask = FreeVariables::none(model.camera_count());
  mask.latent_joints = true;
  OptimizerConfig cfg;
  cfg.max_iterations = iterations;
  const MinimizeResult res =
      minimize({LossVariant::kNoisyJoint, 0.0}, mask, model, latents, td, {0}, cfg, 0);
  const int n = std::max(1, 2 * obs.total_features());
  return {res.latents.joints[0], std::sqrt(res.final_loss / n)};
}

double servo_pixel_error(const Observation& current, const Observation& target) {
  double total = 0.0;
  int count = 0;
  const int n = std::min(current.camera_count(), target.camera_count());
  for (int i = 0; i < n; ++i) {
    for (const PixelFeature& f : target.cams[i]) {
      const auto& cur = current.cams[i];
      const auto it = std::find_if(cur.begin(), cur.end(),
                                   [&](const PixelFeature& g) { return g.id == f.id; });
      if (it == cur.end()) continue;
      total += std::hypot(it->u - f.u, it->v - f.v);
      ++count;
    }
  }
  if (count == 0) return std::numeric_limits<double>::infinity();
  return total / count;
}

std::vector<double> per_camera_pixel_error(const Observation& current, const Observation& target) {
  const int n = std::max(current.camera_count(), target.camera_count());
  std::vector<double> out(n, std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < std::min(current.camera_count(), target.camera_count()); ++i) {
    double total = 0.0;
    int count = 0;
    for (const PixelFeature& f : target.cams[i]) {
      const auto& cur = current.cams[i];
      const auto it = std::find_if(cur.begin(), cur.end(),
                                   [&](const PixelFeature& g) { return g.id == f.id; });
      if (it == cur.end()) continue;
      total += std::hypot(it->u - f.u, it->v - f.v);
      ++count;
    }
    if (count > 0) out[i] = total / count;
  }
  return out;
}

std::string ServoTrace::to_csv(int camera_count) const {
  std::ostringstream out;
  out << "iter,avg_pixel_norm";
  for (int i = 0; i < camera_count; ++i) out << ",cam" << i << "_resid";
  out << "\n";
  out.imbue(std::locale::classic());
  for (const ServoTraceRow& row : rows) {
    out << row.iter << "," << row.avg_pixel_norm;
    for (int i = 0; i < camera_count; ++i)
      out << "," << (i < static_cast<int>(row.cam_residuals.size()) ? row.cam_residuals[i]
                                                                    : std::numeric_limits<double>::quiet_NaN());
    out << "\n";
  }
  return out.str();
}

ServoTrace servo_loop(const ModelParams& model, SimulatedPlant& plant,
                      const Observation& target_obs, const ServoConfig& cfg) {
  ServoTrace trace;
  PnpOptions pnp;
  pnp.seed = cfg.seed;

  const Pose target_pose = infer_pose_from_image(model, target_obs, pnp);

  Observation obs = plant.observe();
  Pose current_pose = infer_pose_from_image(model, obs, pnp);

  JointVector target_joints, j_estimate;
  std::vector<JointVector> action_history;
  if (!cfg.cartesian) {
    const int dof = model.kin.dof();
    // Current joints first: the target branch is then chosen for continuity.
    std::vector<JointVector> current_seeds;
    if (cfg.initial_joint_estimate.size() == dof)
      current_seeds.push_back(cfg.initial_joint_estimate);
    const auto cold_seeds = default_ik_seeds(dof, 16, mix_seed(cfg.seed, 1));
    current_seeds.insert(current_seeds.end(), cold_seeds.begin(), cold_seeds.end());
    auto current_solutions = infer_joints_from_pose(model, current_pose, current_seeds);
    if (current_solutions.empty())
      throw ConvergenceFailure("IK found no joints for the current pose");
    const JointVector anchor = cfg.initial_joint_estimate.size() == dof
                                   ? cfg.initial_joint_estimate
                                   : current_solutions.front();
    j_estimate = select_joint_solution(current_solutions, {}, anchor);

    std::vector<JointVector> target_seeds = {j_estimate};
    target_seeds.insert(target_seeds.end(), cfg.joint_prior.begin(), cfg.joint_prior.end());
    const auto extra = default_ik_seeds(dof, 16, mix_seed(cfg.seed, 2));
    target_seeds.insert(target_seeds.end(), extra.begin(), extra.end());
    const auto target_solutions = infer_joints_from_pose(model, target_pose, target_seeds);
    if (target_solutions.empty())
      throw UnreachableTarget("target pose has no IK solution under the model");
    if (cfg.joint_prior.empty()) {
      target_joints = select_joint_solution(target_solutions, {}, j_estimate);
    } else {
      // Prefer the branch inside the trained envelope.
      double best = std::numeric_limits<double>::infinity();
      for (const JointVector& sol : target_solutions) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const JointVector& prior : cfg.joint_prior)
          nearest = std::min(nearest, (sol - prior).squaredNorm());
        if (nearest < best) {
          best = nearest;
          target_joints = sol;
        }
      }
    }
  }

  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    ServoTraceRow row;
    row.iter = iter;
    JointVector predicted_joints;
    Pose predicted_pose;
    if (cfg.cartesian) {
      Pose delta = compose(target_pose, inverse(current_pose));
      // Plant-protective step limit: large single-step transforms can be
      // rejected by the controller's IK; walk there in bounded pieces.
      const double t_norm = delta.translation().norm();
      const double angle = Eigen::AngleAxisd(delta.rotation()).angle();
      const double scale = std::min(1.0, std::min(0.15 / std::max(t_norm, 1e-12),
                                                  0.3 / std::max(angle, 1e-12)));
      if (scale < 1.0) {
        const Eigen::AngleAxisd aa{delta.rotation()};
        delta = Pose::from_rt(
            Eigen::AngleAxisd(scale * aa.angle(), aa.axis()).toRotationMatrix(),
            Eigen::Vector3d(scale * delta.translation()));
      }
      Pose6 action = from_pose(delta);
      // The noisy controller can refuse a command (its IK fails); re-issue
      // smaller steps rather than aborting the servo run.
      bool commanded = false;
      for (int tries = 0; tries < 5 && !commanded; ++tries) {
        try {
          obs = plant.command_cartesian(action);
          commanded = true;
        } catch (const UnreachableTarget&) {
          delta = Pose::from_rt(
              Eigen::AngleAxisd(0.5 * Eigen::AngleAxisd(delta.rotation()).angle(),
                                Eigen::AngleAxisd(delta.rotation()).axis())
                  .toRotationMatrix(),
              Eigen::Vector3d(0.5 * delta.translation()));
          action = from_pose(delta);
        }
      }
      if (!commanded) throw UnreachableTarget("controller refused every commanded step");
      row.commanded.resize(6);
      row.commanded << action.xyz, action.rpy;
      predicted_pose = compose(to_pose(action), current_pose);
    } else {
      const JointVector delta = target_joints - j_estimate;
      obs = plant.command_joint_delta(delta);
      row.commanded = delta;
      action_history.push_back(delta);
      predicted_joints = j_estimate + delta;
      predicted_pose = forward_kinematics(model.kin, predicted_joints);
    }
    row.avg_pixel_norm = servo_pixel_error(obs, target_obs);
    row.cam_residuals = per_camera_pixel_error(obs, target_obs);
    trace.rows.push_back(std::move(row));

    if (trace.rows.back().avg_pixel_norm <= cfg.pixel_tol) {
      trace.status = ServoStatus::kConverged;
      return trace;
    }
    if (static_cast<int>(trace.rows.size()) > cfg.stall_window) {
      bool non_decreasing = true;
      const size_t n = trace.rows.size();
      for (int k = 0; k < cfg.stall_window; ++k)
        if (trace.rows[n - 1 - k].avg_pixel_norm < trace.rows[n - 2 - k].avg_pixel_norm)
          non_decreasing = false;
      if (non_decreasing) {
        trace.status = ServoStatus::kStalled;
        return trace;
      }
    }
    if (iter == cfg.max_iters) break;

    // Re-infer the state from the fresh image for the next cycle. A warm
    // PnP start can settle in a poor basin right after a noisy step: retry
    // cold before falling back to dead reckoning on the predicted state.
    if (cfg.cartesian) {
      current_pose = infer_pose_from_image(model, obs, pnp, &predicted_pose);
    } else {
      // Track locally first: refine the joints straight from the pixels in
      // the predicted basin. Only re-acquire through PnP + IK when the local
      // fit is poor, and dead-reckon if even that fails.
      bool inferred = false;
      if (obs.total_features() >= 8) {
        const auto [refined, residual] = refine_joints_on_image(model, obs, predicted_joints);
        if (residual < 3.0) {
          j_estimate = refined;
          current_pose = forward_kinematics(model.kin, refined);
          inferred = true;
        }
      }
      for (int attempt = 0; attempt < 2 && !inferred; ++attempt) {
        try {
          current_pose = attempt == 0
                             ? infer_pose_from_image(model, obs, pnp, &predicted_pose)
                             : infer_pose_from_image(model, obs, pnp);
          std::vector<JointVector> seeds = {predicted_joints};
          const auto extra =
              default_ik_seeds(model.kin.dof(), 8, mix_seed(cfg.seed, 100 + iter + 1000 * attempt));
          seeds.insert(seeds.end(), extra.begin(), extra.end());
          const auto solutions = infer_joints_from_pose(model, current_pose, seeds);
          if (solutions.empty()) continue;
          j_estimate = select_joint_solution(solutions, action_history, j_estimate);
          inferred = true;
        } catch (const ConvergenceFailure&) {
        } catch (const InsufficientFeatures&) {
          break;  // view lost entirely; dead-reckon
        }
      }
      if (!inferred) {
        j_estimate = predicted_joints;
        current_pose = predicted_pose;
      }
    }
  }
  trace.status = ServoStatus::kMaxIterations;
  return trace;
}

std::vector<StretchWaypoint> stretch_waypoints(const ModelParams& model,
                                               const std::vector<int>& object_feature_ids,
                                               const Observation& target_obs,
                                               const JointVector& current_joints,
                                               const std::vector<double>& factors) {
  if (factors.empty() || std::abs(factors.back() - 1.0) > 1e-12)
    throw UsageError("stretch factors must end at 1.0");
  std::set<int> object_ids(object_feature_ids.begin(), object_feature_ids.end());
  if (object_ids.empty()) throw UsageError("no object features given");
  for (int id : object_ids)
    if (id < 0 || id >= model.structure.count())
      throw UsageError("object feature id outside the structure");
  if (static_cast<int>(object_ids.size()) == model.structure.count())
    throw UsageError("at least one arm feature must remain");

  Eigen::Vector3d arm_centroid = Eigen::Vector3d::Zero();
  int arm_count = 0;
  for (int k = 0; k < model.structure.count(); ++k) {
    if (object_ids.count(k)) continue;
    arm_centroid += model.structure.coords.col(k);
    ++arm_count;
  }
  arm_centroid /= static_cast<double>(arm_count);

  // Keep only the object features of the goal image.
  Observation object_obs = target_obs;
  for (auto& cam_obs : object_obs.cams) {
    CameraObservation kept;
    for (const PixelFeature& f : cam_obs)
      if (object_ids.count(f.id)) kept.push_back(f);
    cam_obs = std::move(kept);
  }

  std::vector<StretchWaypoint> waypoints;
  JointVector prev_joints = current_joints;
  std::optional<Pose> prev_pose;
  for (const double factor : factors) {
    StretchWaypoint wp;
    wp.factor = factor;
    wp.structure = model.structure;
    if (factor != 1.0)
      for (int id : object_ids)
        wp.structure.coords.col(id) =
            arm_centroid + factor * (model.structure.coords.col(id) - arm_centroid);

    ModelParams stretched = model;
    stretched.structure = wp.structure;
    const Pose pose = infer_pose_from_image(stretched, object_obs, PnpOptions{},
                                            prev_pose ? &*prev_pose : nullptr);
    std::vector<JointVector> seeds = {prev_joints};
    const auto extra = default_ik_seeds(model.kin.dof(), 16, 0xfac70 + waypoints.size());
    seeds.insert(seeds.end(), extra.begin(), extra.end());
    const auto solutions = infer_joints_from_pose(model, pose, seeds);
    if (solutions.empty())
      throw UnreachableTarget("stretch waypoint pose has no IK solution");
    wp.joints = select_joint_solution(solutions, {}, prev_joints);
    prev_joints = wp.joints;
    prev_pose = pose;
    waypoints.push_back(std::move(wp));
  }
  return waypoints;
}

// ---------------------------------------------------------------------------
// Online learning
// ---------------------------------------------------------------------------

namespace {

TrainingData training_data_from_buffer(const OnlineBuffer& buffer, int camera_count) {
  TrainingData td;
  td.camera_count = camera_count;
  for (const OnlineSample& s : buffer.samples()) {
    td.observations.push_back(s.observation);
    td.joints_obs.push_back(s.joints);
  }
  return td;
}

}  // namespace

BlockGradients buffer_gradient_norms(const OnlineBuffer& buffer, const ModelParams& model) {
  if (buffer.size() == 0) throw UsageError("gradient over an empty buffer");
  TrainingData td = training_data_from_buffer(buffer, model.camera_count());
  std::vector<int> ts(td.timesteps());
  std::iota(ts.begin(), ts.end(), 0);
  const FreeVariables mask = FreeVariables::all_model(model.camera_count());
  const Eigen::VectorXd g = loss_gradient({LossVariant::kE2e, 0.0}, model, {}, td, ts, mask, {});
  // Slice by the pack order: base(6), dh(4n), structure(3m), extrinsics(6/cam),
  // intrinsics(4/cam).
  const int n = model.kin.dof(), m = model.structure.count(), c = model.camera_count();
  BlockGradients out;
  out.total = g.norm();
  out.kinematics = g.segment(0, 6 + 4 * n).norm();
  out.structure = g.segment(6 + 4 * n, 3 * m).norm();
  out.cameras.resize(c);
  const int ext0 = 6 + 4 * n + 3 * m;
  const int int0 = ext0 + 6 * c;
  for (int i = 0; i < c; ++i) {
    const double e = g.segment(ext0 + 6 * i, 6).squaredNorm();
    const double k = g.segment(int0 + 4 * i, 4).squaredNorm();
    out.cameras[i] = std::sqrt(e + k);
  }
  return out;
}

std::pair<ModelParams, double> online_update(const OnlineBuffer& buffer, const ModelParams& model,
                                             const OnlineConfig& cfg) {
  const BlockGradients g = buffer_gradient_norms(buffer, model);
  if (g.total <= cfg.grad_norm_threshold) return {model, g.total};
  TrainingData td = training_data_from_buffer(buffer, model.camera_count());
  std::vector<int> ts(td.timesteps());
  std::iota(ts.begin(), ts.end(), 0);
  OptimizerConfig opt;
  opt.max_iterations = cfg.refine_iterations;
  const MinimizeResult res = minimize({LossVariant::kE2e, 0.0},
                                      FreeVariables::all_model(model.camera_count()), model, {},
                                      td, ts, opt, 0);
  return {res.model, g.total};
}

ChangeReport detect_change(const OnlineBuffer& buffer, const ModelParams& model,
                           const BlockGradients& baseline, const OnlineConfig& cfg) {
  if (buffer.size() < 2) throw UsageError("change detection needs at least 2 buffered samples");
  const BlockGradients current = buffer_gradient_norms(buffer, model);
  ChangeReport report;
  report.ratio = current.total / std::max(baseline.total, cfg.baseline_floor);
  if (report.ratio <= cfg.spike_ratio) return report;

  // A shifted camera is the only change that leaves the other cameras'
  // residuals (and so their block gradients) at the pre-change level: flag a
  // camera when exactly one block carries the gradient.
  double cam_max = 0.0, cam_min = std::numeric_limits<double>::infinity();
  int cam_argmax = -1;
  for (size_t i = 0; i < current.cameras.size(); ++i) {
    if (current.cameras[i] > cam_max) {
      cam_max = current.cameras[i];
      cam_argmax = static_cast<int>(i);
    }
    cam_min = std::min(cam_min, current.cameras[i]);
  }
  if (current.cameras.size() >= 2 && cam_min < 0.05 * cam_max) {
    report.kind = ChangeKind::kCamera;
    report.camera_id = cam_argmax;
    return report;
  }

  // Structure vs kinematics: raw block-gradient norms do not separate them
  // (the kinematic block has far higher leverage), so compare the loss each
  // block can explain away with a bounded refit on the buffer -- the
  // gradient-ratio rule normalized by the achievable decrement.
  TrainingData td = training_data_from_buffer(buffer, model.camera_count());
  std::vector<int> ts(td.timesteps());
  std::iota(ts.begin(), ts.end(), 0);
  auto refit_loss = [&](FreeVariables mask) {
    OptimizerConfig opt;
    opt.max_iterations = cfg.refine_iterations * 6;
    return minimize({LossVariant::kE2e, 0.0}, mask, model, {}, td, ts, opt, 0).final_loss;
  };
  FreeVariables structure_mask = FreeVariables::none(model.camera_count());
  structure_mask.structure = true;
  FreeVariables kin_mask = FreeVariables::none(model.camera_count());
  kin_mask.base = kin_mask.dh = true;
  report.kind = refit_loss(structure_mask) < refit_loss(kin_mask) ? ChangeKind::kStructure
                                                                  : ChangeKind::kKinematics;
  return report;
}

void OnlineMonitor::observe_baseline(const ModelParams& model) {
  const BlockGradients g = buffer_gradient_norms(buffer_, model);
  if (!has_baseline_) {
    baseline_ = g;
    has_baseline_ = true;
    return;
  }
  const double a = 0.9;
  baseline_.total = a * baseline_.total + (1 - a) * g.total;
  baseline_.kinematics = a * baseline_.kinematics + (1 - a) * g.kinematics;
  baseline_.structure = a * baseline_.structure + (1 - a) * g.structure;
  baseline_.cameras.resize(g.cameras.size(), 0.0);
  for (size_t i = 0; i < g.cameras.size(); ++i)
    baseline_.cameras[i] = a * baseline_.cameras[i] + (1 - a) * g.cameras[i];
}

ChangeReport OnlineMonitor::check(const ModelParams& model) const {
  return detect_change(buffer_, model, baseline_, cfg_);
}

Observation OnlineMonitor::filter(const Observation& obs) const {
  Observation out = obs;
  for (int id : excluded_)
    if (id >= 0 && id < out.camera_count()) out.cams[id].clear();
  return out;
}

}  // namespace viskin
