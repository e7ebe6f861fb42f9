#include "viskin/learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace viskin {

bool FreeVariables::any() const {
  if (base || dh || structure || latent_poses || latent_joints) return true;
  for (bool b : cam_extrinsics)
    if (b) return true;
  for (bool b : cam_intrinsics)
    if (b) return true;
  return false;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (y > 30.0) return y;
  return std::log(std::expm1(std::max(y, 1e-12)));
}

// ---------------------------------------------------------------------------
// Standalone loss operations (reference forms)
// ---------------------------------------------------------------------------

namespace {

double reprojection_error_at_pose(const Pose& pose, const Structure& structure,
                                  const std::vector<CameraParams>& cameras,
                                  const Observation& actual) {
  const Eigen::Matrix3Xd world = apply_structure(structure, pose);
  double err = 0.0;
  for (int i = 0; i < actual.camera_count(); ++i) {
    if (actual.cams[i].empty()) continue;
    if (i >= static_cast<int>(cameras.size()))
      throw DimensionMismatch("observation references camera beyond the model");
    err += pixel_error(project_all(cameras[i], world), actual.cams[i]);
  }
  return err;
}

}  // namespace

double loss_cam(const std::vector<Pose>& poses, const Structure& structure,
                const std::vector<CameraParams>& cameras, const std::vector<Observation>& obs) {
  if (poses.size() != obs.size()) throw DimensionMismatch("poses/observations length mismatch");
  double total = 0.0;
  for (size_t t = 0; t < poses.size(); ++t)
    total += reprojection_error_at_pose(poses[t], structure, cameras, obs[t]);
  return total;
}

double loss_kin(const KinematicParams& kin, const std::vector<JointVector>& joints,
                const std::vector<Pose>& poses) {
  if (joints.size() != poses.size()) throw DimensionMismatch("joints/poses length mismatch");
  double total = 0.0;
  for (size_t t = 0; t < joints.size(); ++t)
    total += pose_error(forward_kinematics(kin, joints[t]), poses[t]);
  return total;
}

double loss_e2e(const ModelParams& model, const std::vector<JointVector>& joints,
                const std::vector<Observation>& obs) {
  if (joints.size() != obs.size()) throw DimensionMismatch("joints/observations length mismatch");
  double total = 0.0;
  for (size_t t = 0; t < joints.size(); ++t)
    total += reprojection_error_at_pose(forward_kinematics(model.kin, joints[t]), model.structure,
                                        model.cameras, obs[t]);
  return total;
}

double loss_noisycart(const std::vector<Pose>& poses, const std::vector<Pose>& poses_obs,
                      const Structure& structure, const std::vector<CameraParams>& cameras,
                      const std::vector<Observation>& obs, double lambda) {
  if (poses.size() != poses_obs.size()) throw DimensionMismatch("pose sequences differ in length");
  double total = loss_cam(poses, structure, cameras, obs);
  for (size_t t = 0; t < poses.size(); ++t) total += lambda * pose_error(poses[t], poses_obs[t]);
  return total;
}

double loss_noisyjoint(const std::vector<JointVector>& joints,
                       const std::vector<JointVector>& joints_obs, const ModelParams& model,
                       const std::vector<Observation>& obs, double lambda) {
  if (joints.size() != joints_obs.size())
    throw DimensionMismatch("joint sequences differ in length");
  double total = loss_e2e(model, joints, obs);
  for (size_t t = 0; t < joints.size(); ++t) total += lambda * joint_error(joints[t], joints_obs[t]);
  return total;
}

double loss_cartaction(const std::vector<Pose>& poses, const Structure& structure,
                       const std::vector<CameraParams>& cameras,
                       const std::vector<Observation>& obs, const std::vector<Pose>& actions,
                       double lambda) {
  if (poses.size() < 2) throw DimensionMismatch("action loss needs at least 2 timesteps");
  if (actions.size() + 1 < poses.size()) throw DimensionMismatch("missing actions");
  double total = loss_cam(poses, structure, cameras, obs);
  for (size_t t = 0; t + 1 < poses.size(); ++t)
    total += lambda * pose_error(compose(poses[t + 1], inverse(poses[t])), actions[t]);
  return total;
}

double loss_jointaction(const std::vector<JointVector>& joints, const ModelParams& model,
                        const std::vector<Observation>& obs,
                        const std::vector<JointVector>& actions, double lambda) {
  if (joints.size() < 2) throw DimensionMismatch("action loss needs at least 2 timesteps");
  if (actions.size() + 1 < joints.size()) throw DimensionMismatch("missing actions");
  double total = loss_e2e(model, joints, obs);
  for (size_t t = 0; t + 1 < joints.size(); ++t)
    total += lambda * joint_error(joints[t + 1] - joints[t], actions[t]);
  return total;
}

// ---------------------------------------------------------------------------
// Training data extraction
// ---------------------------------------------------------------------------

TrainingData training_data_from_dataset(const Dataset& data) {
  TrainingData td;
  td.camera_count = data.camera_count();
  const int t_count = data.size();
  td.observations.reserve(t_count);
  for (const DatasetRecord& rec : data.records) td.observations.push_back(rec.observation);

  switch (data.regime) {
    case Regime::kJoints:
      for (const DatasetRecord& rec : data.records) {
        if (!rec.joints) throw UsageError("joints regime record lacks joints");
        td.joints_obs.push_back(*rec.joints);
      }
      break;
    case Regime::kNoisyJoints:
      for (const DatasetRecord& rec : data.records) {
        if (!rec.noisy_joints) throw UsageError("noisy_joints regime record lacks noisy_joints");
        td.joints_obs.push_back(*rec.noisy_joints);
      }
      break;
    case Regime::kJointActions: {
      for (int t = 0; t + 1 < t_count; ++t) {
        if (!data.records[t].joint_action) throw UsageError("missing joint_action");
        td.joint_actions.push_back(*data.records[t].joint_action);
      }
      // Compose actions from the home configuration as the state estimate.
      JointVector j;
      if (!td.joint_actions.empty())
        j = JointVector::Zero(td.joint_actions.front().size());
      else
        j = JointVector::Zero(1);
      for (int t = 0; t < t_count; ++t) {
        td.joints_obs.push_back(j);
        if (t + 1 < t_count) j = j + td.joint_actions[t];
      }
      break;
    }
    case Regime::kCartActions: {
      for (int t = 0; t + 1 < t_count; ++t) {
        if (!data.records[t].cart_action) throw UsageError("missing cart_action");
        td.cart_actions.push_back(to_pose(*data.records[t].cart_action));
      }
      Pose p;
      for (int t = 0; t < t_count; ++t) {
        td.poses_obs.push_back(p);
        if (t + 1 < t_count) p = compose(td.cart_actions[t], p);
      }
      break;
    }
    case Regime::kNoisyPose:
      for (const DatasetRecord& rec : data.records) {
        if (!rec.noisy_pose) throw UsageError("noisy_pose regime record lacks noisy_pose");
        td.poses_obs.push_back(to_pose(*rec.noisy_pose));
      }
      break;
  }
  return td;
}

LossSpec loss_spec_for_regime(Regime regime, double lambda) {
  switch (regime) {
    case Regime::kJoints: return {LossVariant::kE2e, 0.0};
    case Regime::kNoisyJoints: return {LossVariant::kNoisyJoint, lambda};
    case Regime::kJointActions: return {LossVariant::kJointAction, lambda};
    case Regime::kCartActions: return {LossVariant::kCartAction, lambda};
    case Regime::kNoisyPose: return {LossVariant::kNoisyCart, lambda};
  }
  return {LossVariant::kE2e, 0.0};
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

namespace {

struct PackLayout {
  int total = 0;
  int base_off = -1;
  int dh_off = -1;
  int structure_off = -1;
  std::vector<int> ext_off;
  std::vector<int> int_off;
  int latent_off = -1;
  int latent_stride = 0;
};

PackLayout make_layout(const ModelParams& model, const FreeVariables& mask, int latent_count,
                       int dof_for_latents) {
  PackLayout l;
  int off = 0;
  if (mask.base) {
    l.base_off = off;
    off += 6;
  }
  if (mask.dh) {
    l.dh_off = off;
    off += 4 * model.kin.dof();
  }
  if (mask.structure) {
    l.structure_off = off;
    off += 3 * model.structure.count();
  }
  l.ext_off.assign(model.camera_count(), -1);
  l.int_off.assign(model.camera_count(), -1);
  for (int i = 0; i < model.camera_count(); ++i) {
    if (i < static_cast<int>(mask.cam_extrinsics.size()) && mask.cam_extrinsics[i]) {
      l.ext_off[i] = off;
      off += 6;
    }
  }
  for (int i = 0; i < model.camera_count(); ++i) {
    if (i < static_cast<int>(mask.cam_intrinsics.size()) && mask.cam_intrinsics[i]) {
      l.int_off[i] = off;
      off += 4;
    }
  }
  if (mask.latent_poses) {
    l.latent_off = off;
    l.latent_stride = 6;
    off += 6 * latent_count;
  } else if (mask.latent_joints) {
    l.latent_off = off;
    l.latent_stride = dof_for_latents;
    off += dof_for_latents * latent_count;
  }
  l.total = off;
  return l;
}

}  // namespace

Eigen::VectorXd pack_free_variables(const ModelParams& model, const Latents& latents,
                                    const FreeVariables& mask,
                                    const std::vector<int>& latent_timesteps) {
  const int dof = model.kin.dof();
  const PackLayout l = make_layout(model, mask, static_cast<int>(latent_timesteps.size()), dof);
  Eigen::VectorXd x(l.total);
  if (l.base_off >= 0) {
    x.segment<3>(l.base_off) = model.kin.base.xyz;
    x.segment<3>(l.base_off + 3) = model.kin.base.rpy;
  }
  if (l.dh_off >= 0)
    for (int i = 0; i < dof; ++i) {
      x[l.dh_off + 4 * i + 0] = model.kin.rows[i].omega;
      x[l.dh_off + 4 * i + 1] = model.kin.rows[i].d;
      x[l.dh_off + 4 * i + 2] = model.kin.rows[i].a;
      x[l.dh_off + 4 * i + 3] = model.kin.rows[i].alpha;
    }
  if (l.structure_off >= 0)
    for (int k = 0; k < model.structure.count(); ++k)
      x.segment<3>(l.structure_off + 3 * k) = model.structure.coords.col(k);
  for (int i = 0; i < model.camera_count(); ++i) {
    if (l.ext_off[i] >= 0) {
      x.segment<3>(l.ext_off[i]) = model.cameras[i].extrinsics.xyz;
      x.segment<3>(l.ext_off[i] + 3) = model.cameras[i].extrinsics.rpy;
    }
    if (l.int_off[i] >= 0) {
      x[l.int_off[i] + 0] = softplus_inverse(model.cameras[i].intrinsics.fx);
      x[l.int_off[i] + 1] = softplus_inverse(model.cameras[i].intrinsics.fy);
      x[l.int_off[i] + 2] = model.cameras[i].intrinsics.px;
      x[l.int_off[i] + 3] = model.cameras[i].intrinsics.py;
    }
  }
  if (mask.latent_poses) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s) {
      const Pose6& p = latents.poses.at(latent_timesteps[s]);
      x.segment<3>(l.latent_off + 6 * s) = p.xyz;
      x.segment<3>(l.latent_off + 6 * s + 3) = p.rpy;
    }
  } else if (mask.latent_joints) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s)
      x.segment(l.latent_off + dof * s, dof) = latents.joints.at(latent_timesteps[s]);
  }
  return x;
}

void unpack_free_variables(const Eigen::VectorXd& x, const FreeVariables& mask,
                           const std::vector<int>& latent_timesteps, ModelParams* model,
                           Latents* latents) {
  const int dof = model->kin.dof();
  const PackLayout l = make_layout(*model, mask, static_cast<int>(latent_timesteps.size()), dof);
  if (l.base_off >= 0) {
    model->kin.base.xyz = x.segment<3>(l.base_off);
    model->kin.base.rpy = x.segment<3>(l.base_off + 3);
  }
  if (l.dh_off >= 0)
    for (int i = 0; i < dof; ++i) {
      model->kin.rows[i].omega = x[l.dh_off + 4 * i + 0];
      model->kin.rows[i].d = x[l.dh_off + 4 * i + 1];
      model->kin.rows[i].a = x[l.dh_off + 4 * i + 2];
      model->kin.rows[i].alpha = x[l.dh_off + 4 * i + 3];
    }
  if (l.structure_off >= 0)
    for (int k = 0; k < model->structure.count(); ++k)
      model->structure.coords.col(k) = x.segment<3>(l.structure_off + 3 * k);
  for (int i = 0; i < model->camera_count(); ++i) {
    if (l.ext_off[i] >= 0) {
      model->cameras[i].extrinsics.xyz = x.segment<3>(l.ext_off[i]);
      model->cameras[i].extrinsics.rpy = x.segment<3>(l.ext_off[i] + 3);
    }
    if (l.int_off[i] >= 0) {
      model->cameras[i].intrinsics.fx = softplus(x[l.int_off[i] + 0]);
      model->cameras[i].intrinsics.fy = softplus(x[l.int_off[i] + 1]);
      model->cameras[i].intrinsics.px = x[l.int_off[i] + 2];
      model->cameras[i].intrinsics.py = x[l.int_off[i] + 3];
    }
  }
  if (mask.latent_poses) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s) {
      Pose6& p = latents->poses.at(latent_timesteps[s]);
      p.xyz = x.segment<3>(l.latent_off + 6 * s);
      p.rpy = x.segment<3>(l.latent_off + 6 * s + 3);
    }
  } else if (mask.latent_joints) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s)
      latents->joints.at(latent_timesteps[s]) = x.segment(l.latent_off + dof * s, dof);
  }
}

// ---------------------------------------------------------------------------
// Loss + gradient core
// ---------------------------------------------------------------------------

namespace {

struct GradientSink {
  Vector6d base = Vector6d::Zero();
  Eigen::Matrix<double, Eigen::Dynamic, 4> dh;
  Eigen::Matrix3Xd structure;
  std::vector<Eigen::Matrix<double, 3, 4>> cam_adjoint;  // [dL/dR_E | dL/dt_E]
  std::vector<Eigen::Vector4d> cam_intrinsics;           // (fx, fy, px, py)
  std::vector<Vector6d> latent_poses;
  std::vector<JointVector> latent_joints;

  GradientSink(const ModelParams& model, int t_count) {
    dh.setZero(model.kin.dof(), 4);
    structure.setZero(3, model.structure.count());
    cam_adjoint.assign(model.camera_count(), Eigen::Matrix<double, 3, 4>::Zero());
    cam_intrinsics.assign(model.camera_count(), Eigen::Vector4d::Zero());
    latent_poses.assign(t_count, Vector6d::Zero());
    latent_joints.assign(t_count, JointVector::Zero(model.kin.dof()));
  }
};

Vector6d chain_pose6(const Eigen::Matrix<double, 3, 4>& adj, const Pose6& p6) {
  Vector6d g;
  g.head<3>() = adj.col(3);
  const auto dr = rpy_rotation_jacobian(p6.rpy);
  for (int k = 0; k < 3; ++k) g[3 + k] = adj.leftCols<3>().cwiseProduct(dr[k]).sum();
  return g;
}

bool uses_latent_poses(LossVariant v) {
  return v == LossVariant::kCam || v == LossVariant::kNoisyCart || v == LossVariant::kCartAction;
}

bool uses_latent_joints(LossVariant v) {
  return v == LossVariant::kNoisyJoint || v == LossVariant::kJointAction;
}

// Single pass over the active timesteps computing the loss and, when `sink`
// is given, accumulating all gradient blocks. With `probe` set the residual
// weights are replaced by Rademacher signs, turning the accumulated vector
// into one Hutchinson sample of J^T v whose squared entries estimate the
// Gauss-Newton diagonal (used for preconditioning only).
double evaluate_core(const LossSpec& spec, const ModelParams& model, const Latents& latents,
                     const TrainingData& data, const std::vector<int>& timesteps,
                     GradientSink* sink, Rng* probe = nullptr) {
  const int c = model.camera_count();
  const int m = model.structure.count();
  double total = 0.0;

  std::vector<Pose> cam_poses(c);
  std::vector<Mat3d> cam_rot_t(c);
  for (int i = 0; i < c; ++i) {
    cam_poses[i] = to_pose(model.cameras[i].extrinsics);
    cam_rot_t[i] = cam_poses[i].rotation().transpose();
  }

  const bool pixel_loss = spec.variant != LossVariant::kKin;

  for (const int t : timesteps) {
    // Pose source for this timestep.
    Pose pose;
    FkCache fk;
    const bool from_fk = !uses_latent_poses(spec.variant);
    JointVector joints_t;
    if (from_fk) {
      joints_t = uses_latent_joints(spec.variant) ? latents.joints.at(t) : data.joints_obs.at(t);
      fk = forward_kinematics_cache(model.kin, joints_t);
      pose = fk.pose;
    } else {
      pose = to_pose(latents.poses.at(t));
    }
    const Mat3d pose_rot_t = pose.rotation().transpose();

    Eigen::Matrix<double, 3, 4> pose_adjoint = Eigen::Matrix<double, 3, 4>::Zero();
    Mat4d pose_adjoint44 = Mat4d::Zero();
    bool have_adjoint44 = false;

    if (pixel_loss) {
      const Eigen::Matrix3Xd world = (pose.rotation() * model.structure.coords).colwise() +
                                     pose.translation();
      const Observation& actual = data.observations.at(t);
      for (int i = 0; i < actual.camera_count() && i < c; ++i) {
        if (actual.cams[i].empty()) continue;
        const Intrinsics& K = model.cameras[i].intrinsics;
        const Mat3d& re = cam_rot_t[i];  // transpose of extrinsic rotation
        for (const PixelFeature& f : actual.cams[i]) {
          if (f.id < 0 || f.id >= m)
            throw DimensionMismatch("observed feature id outside structure");
          const Eigen::Vector3d M = world.col(f.id);
          const Eigen::Vector3d q = cam_poses[i].rotation() * M + cam_poses[i].translation();
          const double z = q.z();
          const double u = K.fx * q.x() / z + K.px;
          const double v = K.fy * q.y() / z + K.py;
          const double ru = u - f.u, rv = v - f.v;
          total += ru * ru + rv * rv;
          if (sink == nullptr) continue;
          const double du = probe ? (probe->uniform01() < 0.5 ? -1.0 : 1.0) : 2.0 * ru;
          const double dv = probe ? (probe->uniform01() < 0.5 ? -1.0 : 1.0) : 2.0 * rv;
          sink->cam_intrinsics[i] += Eigen::Vector4d(du * q.x() / z, dv * q.y() / z, du, dv);
          Eigen::Vector3d gq(du * K.fx / z, dv * K.fy / z,
                             -(du * K.fx * q.x() + dv * K.fy * q.y()) / (z * z));
          sink->cam_adjoint[i].leftCols<3>() += gq * M.transpose();
          sink->cam_adjoint[i].col(3) += gq;
          const Eigen::Vector3d dM = re * gq;
          sink->structure.col(f.id) += pose_rot_t * dM;
          pose_adjoint.leftCols<3>() += dM * model.structure.coords.col(f.id).transpose();
          pose_adjoint.col(3) += dM;
        }
      }
    }

    // Pose-space penalty terms.
    if (spec.variant == LossVariant::kKin || spec.variant == LossVariant::kNoisyCart) {
      const Pose& target = data.poses_obs.at(t);
      const Mat4d diff = pose.m - target.m;
      const double norm = diff.norm();
      const double w = spec.variant == LossVariant::kKin ? 1.0 : spec.lambda;
      total += w * norm;
      if (sink != nullptr && probe != nullptr) {
        const double scale = std::sqrt(w / std::max(norm, 1e-6));
        Mat4d v;
        for (int r = 0; r < 4; ++r)
          for (int c = 0; c < 4; ++c) v(r, c) = probe->uniform01() < 0.5 ? -scale : scale;
        pose_adjoint44 += v;
        have_adjoint44 = true;
      } else if (sink != nullptr && norm > 1e-12) {
        pose_adjoint44 += (w / norm) * diff;
        have_adjoint44 = true;
      }
    } else if (spec.variant == LossVariant::kNoisyJoint) {
      const JointVector& jo = data.joints_obs.at(t);
      total += spec.lambda * (joints_t - jo).squaredNorm();
      if (sink != nullptr && probe != nullptr) {
        const double scale = std::sqrt(2.0 * spec.lambda);
        for (int i = 0; i < joints_t.size(); ++i)
          sink->latent_joints[t][i] += probe->uniform01() < 0.5 ? -scale : scale;
      } else if (sink != nullptr) {
        sink->latent_joints[t] += 2.0 * spec.lambda * (joints_t - jo);
      }
    }

    if (sink == nullptr) continue;

    if (from_fk) {
      pose_adjoint44.block<3, 4>(0, 0) += pose_adjoint;
      FkGradient out;
      out.base = &sink->base;
      out.dh = &sink->dh;
      out.joints = uses_latent_joints(spec.variant) ? &sink->latent_joints[t] : nullptr;
      fk_backpropagate(model.kin, joints_t, fk, pose_adjoint44, out);
    } else {
      if (have_adjoint44) pose_adjoint += pose_adjoint44.block<3, 4>(0, 0);
      sink->latent_poses[t] += chain_pose6(pose_adjoint, latents.poses.at(t));
    }
  }

  // Consecutive-timestep action penalties couple pairs; a pair contributes
  // when both of its timesteps are active.
  if (spec.variant == LossVariant::kCartAction || spec.variant == LossVariant::kJointAction) {
    std::vector<char> active(data.timesteps(), 0);
    for (int t : timesteps) active[t] = 1;
    if (spec.variant == LossVariant::kCartAction) {
      for (size_t t = 0; t + 1 < static_cast<size_t>(data.timesteps()); ++t) {
        if (!active[t] || !active[t + 1]) continue;
        const Pose p1 = to_pose(latents.poses.at(t));
        const Pose p2 = to_pose(latents.poses.at(t + 1));
        const Pose p1_inv = inverse(p1);
        const Mat4d g = p2.m * p1_inv.m;
        const Mat4d diff = g - data.cart_actions.at(t).m;
        const double norm = diff.norm();
        total += spec.lambda * norm;
        if (sink == nullptr) continue;
        Mat4d w;
        if (probe != nullptr) {
          const double scale = std::sqrt(spec.lambda / std::max(norm, 1e-6));
          for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) w(r, c) = probe->uniform01() < 0.5 ? -scale : scale;
        } else if (norm > 1e-12) {
          w = (spec.lambda / norm) * diff;
        } else {
          continue;
        }
        const Mat4d adj_p2 = w * p1_inv.m.transpose();
        const Mat4d adj_p1 = -p1_inv.m.transpose() * p2.m.transpose() * w * p1_inv.m.transpose();
        sink->latent_poses[t + 1] +=
            chain_pose6(adj_p2.block<3, 4>(0, 0), latents.poses.at(t + 1));
        // The bottom adjoint row acts on P's constant [0,0,0,1] row and is
        // dropped by the Pose6 chain.
        sink->latent_poses[t] += chain_pose6(adj_p1.block<3, 4>(0, 0), latents.poses.at(t));
      }
    } else {
      for (size_t t = 0; t + 1 < static_cast<size_t>(data.timesteps()); ++t) {
        if (!active[t] || !active[t + 1]) continue;
        const JointVector d =
            (latents.joints.at(t + 1) - latents.joints.at(t)) - data.joint_actions.at(t);
        total += spec.lambda * d.squaredNorm();
        if (sink == nullptr) continue;
        if (probe != nullptr) {
          const double scale = std::sqrt(2.0 * spec.lambda);
          for (int i = 0; i < d.size(); ++i) {
            const double v = probe->uniform01() < 0.5 ? -scale : scale;
            sink->latent_joints[t + 1][i] += v;
            sink->latent_joints[t][i] -= v;
          }
        } else {
          sink->latent_joints[t + 1] += 2.0 * spec.lambda * d;
          sink->latent_joints[t] -= 2.0 * spec.lambda * d;
        }
      }
    }
  }

  return total;
}

Eigen::VectorXd pack_gradient(const GradientSink& sink, const ModelParams& model,
                              const FreeVariables& mask,
                              const std::vector<int>& latent_timesteps) {
  const int dof = model.kin.dof();
  const PackLayout l = make_layout(model, mask, static_cast<int>(latent_timesteps.size()), dof);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(l.total);
  if (l.base_off >= 0) g.segment<6>(l.base_off) = sink.base;
  if (l.dh_off >= 0)
    for (int i = 0; i < dof; ++i)
      for (int k = 0; k < 4; ++k) g[l.dh_off + 4 * i + k] = sink.dh(i, k);
  if (l.structure_off >= 0)
    for (int k = 0; k < model.structure.count(); ++k)
      g.segment<3>(l.structure_off + 3 * k) = sink.structure.col(k);
  for (int i = 0; i < model.camera_count(); ++i) {
    if (l.ext_off[i] >= 0)
      g.segment<6>(l.ext_off[i]) = chain_pose6(sink.cam_adjoint[i], model.cameras[i].extrinsics);
    if (l.int_off[i] >= 0) {
      // Chain through the softplus reparametrization of the focal lengths:
      // d softplus / d raw = 1 - exp(-fx).
      const double sfx = 1.0 - std::exp(-model.cameras[i].intrinsics.fx);
      const double sfy = 1.0 - std::exp(-model.cameras[i].intrinsics.fy);
      g[l.int_off[i] + 0] = sink.cam_intrinsics[i][0] * sfx;
      g[l.int_off[i] + 1] = sink.cam_intrinsics[i][1] * sfy;
      g[l.int_off[i] + 2] = sink.cam_intrinsics[i][2];
      g[l.int_off[i] + 3] = sink.cam_intrinsics[i][3];
    }
  }
  if (mask.latent_poses) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s)
      g.segment<6>(l.latent_off + 6 * s) = sink.latent_poses[latent_timesteps[s]];
  } else if (mask.latent_joints) {
    for (size_t s = 0; s < latent_timesteps.size(); ++s)
      g.segment(l.latent_off + dof * s, dof) = sink.latent_joints[latent_timesteps[s]];
  }
  return g;
}

}  // namespace

double evaluate_loss(const LossSpec& spec, const ModelParams& model, const Latents& latents,
                     const TrainingData& data, const std::vector<int>& timesteps) {
  return evaluate_core(spec, model, latents, data, timesteps, nullptr);
}

Eigen::VectorXd loss_gradient(const LossSpec& spec, const ModelParams& model,
                              const Latents& latents, const TrainingData& data,
                              const std::vector<int>& timesteps, const FreeVariables& mask,
                              const std::vector<int>& latent_timesteps, double* loss_out) {
  GradientSink sink(model, data.timesteps());
  const double loss = evaluate_core(spec, model, latents, data, timesteps, &sink);
  if (!std::isfinite(loss)) throw NonFiniteValue("loss is not finite");
  Eigen::VectorXd g = pack_gradient(sink, model, mask, latent_timesteps);
  if (!g.allFinite()) throw NonFiniteValue("gradient is not finite");
  if (loss_out != nullptr) *loss_out = loss;
  return g;
}

// ---------------------------------------------------------------------------
// Minimization driver
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<int>> make_batches(const std::vector<int>& timesteps, int batch_count,
                                           bool contiguous, Rng& rng) {
  std::vector<int> order = timesteps;
  std::vector<std::vector<int>> batches(batch_count);
  if (contiguous) {
    // Contiguous chunks keep consecutive-pair penalties alive inside a batch;
    // only the visiting order is shuffled.
    std::sort(order.begin(), order.end());
    const int n = static_cast<int>(order.size());
    for (int b = 0; b < batch_count; ++b) {
      const int lo = b * n / batch_count, hi = (b + 1) * n / batch_count;
      batches[b].assign(order.begin() + lo, order.begin() + hi);
    }
  } else {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (size_t i = 0; i < order.size(); ++i)
      batches[i % batch_count].push_back(order[i]);
    for (auto& b : batches) std::sort(b.begin(), b.end());
  }
  return batches;
}

}  // namespace

MinimizeResult minimize(const LossSpec& spec, const FreeVariables& mask, const ModelParams& init,
                        const Latents& init_latents, const TrainingData& data,
                        const std::vector<int>& timesteps, const OptimizerConfig& cfg,
                        uint64_t seed) {
  if (!mask.any()) throw UsageError("minimize needs at least one free block");
  const bool contiguous_batches =
      spec.variant == LossVariant::kCartAction || spec.variant == LossVariant::kJointAction;

  MinimizeResult best;
  bool have_best = false;
  const int restarts = std::max(1, cfg.restarts);

  for (int r = 0; r < restarts; ++r) {
    Rng rng(mix_seed(seed, 0xba7c4 + r));
    ModelParams model = init;
    Latents latents = init_latents;
    Eigen::VectorXd x = pack_free_variables(model, latents, mask, timesteps);
    std::vector<double> trace;
    int iterations = 0;
    bool ls_failed = false;

    auto run_segment = [&](const std::vector<int>& ts, int iters) {
      // Jacobi preconditioning: estimate the Gauss-Newton diagonal at the
      // segment's start from a few Hutchinson probes and optimize in scaled
      // variables. This evens out the huge curvature spread between pixels,
      // intrinsics, and geometry blocks.
      unpack_free_variables(x, mask, timesteps, &model, &latents);
      Eigen::VectorXd diag = Eigen::VectorXd::Zero(x.size());
      Rng probe_rng(rng.fork(0x9c0be + iterations).seed());
      const int probes = 6;
      for (int p = 0; p < probes; ++p) {
        GradientSink sink(model, data.timesteps());
        evaluate_core(spec, model, latents, data, ts, &sink, &probe_rng);
        const Eigen::VectorXd s = pack_gradient(sink, model, mask, timesteps);
        diag += s.cwiseProduct(s);
      }
      diag /= probes;
      const double floor = std::max(1e-12, 1e-6 * diag.maxCoeff());
      Eigen::VectorXd scale(x.size());
      for (int i = 0; i < x.size(); ++i) scale[i] = std::sqrt(std::max(diag[i], floor));

      const Objective obj = [&](const Eigen::VectorXd& y, Eigen::VectorXd* grad) -> double {
        const Eigen::VectorXd v = y.cwiseQuotient(scale);
        unpack_free_variables(v, mask, timesteps, &model, &latents);
        if (grad == nullptr) return evaluate_core(spec, model, latents, data, ts, nullptr);
        GradientSink sink(model, data.timesteps());
        const double f = evaluate_core(spec, model, latents, data, ts, &sink);
        *grad = pack_gradient(sink, model, mask, timesteps).cwiseQuotient(scale);
        return f;
      };
      LbfgsOptions lopt = cfg.lbfgs;
      lopt.max_iterations = iters;
      const LbfgsResult lr = lbfgs_minimize(obj, x.cwiseProduct(scale), lopt);
      x = lr.x.cwiseQuotient(scale);
      unpack_free_variables(x, mask, timesteps, &model, &latents);
      iterations += lr.iterations;
      ls_failed = lr.line_search_failed;
      trace.insert(trace.end(), lr.trace.begin(), lr.trace.end());
    };

    // The preconditioner goes stale as the iterate moves; refresh it on a
    // fixed cadence within each phase.
    auto run_phase = [&](const std::vector<int>& ts, int iters) {
      const int refresh = 250;
      int used = 0;
      while (used < iters) {
        const int len = std::min(refresh, iters - used);
        const size_t before = trace.size();
        run_segment(ts, len);
        used += len;
        // Converged segments stop making progress; bail out of the phase.
        if (trace.size() == before) break;
      }
    };

    const bool minibatch_usable = cfg.use_minibatch &&
                                  static_cast<int>(timesteps.size()) >= 2 * cfg.minibatch.batch_count;
    if (!minibatch_usable) {
      run_phase(timesteps, cfg.max_iterations);
    } else {
      const auto batches =
          make_batches(timesteps, cfg.minibatch.batch_count, contiguous_batches, rng);
      int used = 0, seg = 0;
      while (used < cfg.minibatch.minibatch_iterations) {
        const int len = std::min(cfg.minibatch.segment_length,
                                 cfg.minibatch.minibatch_iterations - used);
        run_phase(batches[seg % batches.size()], len);
        used += len;
        ++seg;
      }
      run_phase(timesteps, cfg.minibatch.full_iterations);
    }

    const double final_loss = evaluate_core(spec, model, latents, data, timesteps, nullptr);
    if (!have_best || final_loss < best.final_loss) {
      best.model = std::move(model);
      best.latents = std::move(latents);
      best.final_loss = final_loss;
      best.iterations = iterations;
      best.line_search_failed = ls_failed;
      best.trace = std::move(trace);
      have_best = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Relearning and evaluation
// ---------------------------------------------------------------------------

ModelParams relearn(const ModelParams& params, const FreeVariables& mask, const Dataset& new_data,
                    const OptimizerConfig& cfg, uint64_t seed) {
  if (!mask.any()) return params;
  TrainingData td = training_data_from_dataset(new_data);
  std::vector<int> ts(td.timesteps());
  std::iota(ts.begin(), ts.end(), 0);
  Latents latents;
  const MinimizeResult res =
      minimize({LossVariant::kE2e, 0.0}, mask, params, latents, td, ts, cfg, seed);
  return res.model;
}

double evaluate_average_pixel_norm(const ModelParams& model, const Dataset& data) {
  double total = 0.0;
  int count = 0;
  for (const DatasetRecord& rec : data.records) {
    if (!rec.joints) throw UsageError("evaluation needs records with true joints");
    const Observation gen = generate_observation_all(model, *rec.joints);
    for (int i = 0; i < rec.observation.camera_count(); ++i) {
      for (const PixelFeature& f : rec.observation.cams[i]) {
        const auto& cam = gen.cams.at(i);
        const auto it = std::find_if(cam.begin(), cam.end(),
                                     [&](const PixelFeature& g) { return g.id == f.id; });
        if (it == cam.end()) throw MissingGenerated("feature missing from generated view");
        total += std::hypot(it->u - f.u, it->v - f.v);
        ++count;
      }
    }
  }
  return count > 0 ? total / count : 0.0;
}

double evaluate_e2e_loss(const ModelParams& model, const Dataset& data) {
  std::vector<JointVector> joints;
  std::vector<Observation> obs;
  for (const DatasetRecord& rec : data.records) {
    if (!rec.joints) throw UsageError("evaluation needs records with true joints");
    joints.push_back(*rec.joints);
    obs.push_back(rec.observation);
  }
  return loss_e2e(model, joints, obs);
}

}  // namespace viskin
