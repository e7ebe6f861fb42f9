#pragma once

#include <optional>
#include <string>
#include <vector>

#include "viskin/model.hpp"
#include "viskin/optimizer.hpp"
#include "viskin/simulator.hpp"

namespace viskin {

// ---------------------------------------------------------------------------
// Loss definitions
// ---------------------------------------------------------------------------

enum class LossVariant { kCam, kKin, kE2e, kNoisyCart, kNoisyJoint, kCartAction, kJointAction };

struct LossSpec {
  LossVariant variant = LossVariant::kCam;
  double lambda = 0.0;  // penalty weight; unused for cam/kin/e2e
};

/// Reprojection error: sum over timesteps and cameras of the quadratic pixel
/// error between generated and observed feature coordinates.
double loss_cam(const std::vector<Pose>& poses, const Structure& structure,
                const std::vector<CameraParams>& cameras, const std::vector<Observation>& obs);

/// Sum over timesteps of the Frobenius pose error between FK(R, j_t) and P_t.
double loss_kin(const KinematicParams& kin, const std::vector<JointVector>& joints,
                const std::vector<Pose>& poses);

/// Reprojection error with poses generated by the kinematic chain.
double loss_e2e(const ModelParams& model, const std::vector<JointVector>& joints,
                const std::vector<Observation>& obs);

double loss_noisycart(const std::vector<Pose>& poses, const std::vector<Pose>& poses_obs,
                      const Structure& structure, const std::vector<CameraParams>& cameras,
                      const std::vector<Observation>& obs, double lambda);

double loss_noisyjoint(const std::vector<JointVector>& joints,
                       const std::vector<JointVector>& joints_obs, const ModelParams& model,
                       const std::vector<Observation>& obs, double lambda);

double loss_cartaction(const std::vector<Pose>& poses, const Structure& structure,
                       const std::vector<CameraParams>& cameras,
                       const std::vector<Observation>& obs, const std::vector<Pose>& actions,
                       double lambda);

double loss_jointaction(const std::vector<JointVector>& joints, const ModelParams& model,
                        const std::vector<Observation>& obs,
                        const std::vector<JointVector>& actions, double lambda);

// ---------------------------------------------------------------------------
// Free-variable packing
// ---------------------------------------------------------------------------

/// Mask over parameter blocks plus the optional per-timestep latents. Focal
/// lengths are optimized through a softplus reparametrization so positivity
/// needs no explicit constraint.
struct FreeVariables {
  bool base = false;
  bool dh = false;
  bool structure = false;
  std::vector<bool> cam_extrinsics;
  std::vector<bool> cam_intrinsics;
  bool latent_poses = false;
  bool latent_joints = false;

  static FreeVariables none(int cameras) {
    FreeVariables f;
    f.cam_extrinsics.assign(cameras, false);
    f.cam_intrinsics.assign(cameras, false);
    return f;
  }
  static FreeVariables all_model(int cameras) {
    FreeVariables f = none(cameras);
    f.base = f.dh = f.structure = true;
    f.cam_extrinsics.assign(cameras, true);
    f.cam_intrinsics.assign(cameras, true);
    return f;
  }
  bool any() const;
};

/// Per-timestep unknowns optimized alongside the model in some regimes.
struct Latents {
  std::vector<Pose6> poses;
  std::vector<JointVector> joints;
};

/// Observed quantities extracted from a Dataset for one training regime.
struct TrainingData {
  std::vector<Observation> observations;
  std::vector<JointVector> joints_obs;     // observed (or composed) joint states
  std::vector<Pose> poses_obs;             // observed (or composed) end-effector poses
  std::vector<JointVector> joint_actions;  // a_t taking state t to t+1
  std::vector<Pose> cart_actions;          // A_t taking pose t to t+1
  int camera_count = 0;

  int timesteps() const { return static_cast<int>(observations.size()); }
};

TrainingData training_data_from_dataset(const Dataset& data);

LossSpec loss_spec_for_regime(Regime regime, double lambda);

double softplus(double x);
double softplus_inverse(double y);

Eigen::VectorXd pack_free_variables(const ModelParams& model, const Latents& latents,
                                    const FreeVariables& mask,
                                    const std::vector<int>& latent_timesteps);
void unpack_free_variables(const Eigen::VectorXd& x, const FreeVariables& mask,
                           const std::vector<int>& latent_timesteps, ModelParams* model,
                           Latents* latents);

/// Loss over the given timestep subset.
double evaluate_loss(const LossSpec& spec, const ModelParams& model, const Latents& latents,
                     const TrainingData& data, const std::vector<int>& timesteps);

/// Exact gradient of the selected loss with respect to the packed
/// free-variable vector; throws NonFiniteValue when inputs or the result are
/// not finite.
Eigen::VectorXd loss_gradient(const LossSpec& spec, const ModelParams& model,
                              const Latents& latents, const TrainingData& data,
                              const std::vector<int>& timesteps, const FreeVariables& mask,
                              const std::vector<int>& latent_timesteps, double* loss_out = nullptr);

// ---------------------------------------------------------------------------
// Minimization
// ---------------------------------------------------------------------------

struct MinibatchSchedule {
  int batch_count = 4;
  int minibatch_iterations = 150;
  int full_iterations = 50;
  int segment_length = 15;  // iterations per batch before switching
};

struct OptimizerConfig {
  LbfgsOptions lbfgs;
  int max_iterations = 200;
  bool use_minibatch = false;
  MinibatchSchedule minibatch;
  int restarts = 1;  // re-runs with different minibatch shuffles
};

struct MinimizeResult {
  ModelParams model;
  Latents latents;
  double final_loss = 0.0;
  int iterations = 0;
  bool line_search_failed = false;
  std::vector<double> trace;
};

/// Minibatch L-BFGS over the masked free variables: random minibatch
/// segments first, then a full-data phase. Deterministic given the seed;
/// with several restarts the best final full-data loss wins (ties go to the
/// lowest restart seed).
MinimizeResult minimize(const LossSpec& spec, const FreeVariables& mask, const ModelParams& init,
                        const Latents& init_latents, const TrainingData& data,
                        const std::vector<int>& timesteps, const OptimizerConfig& cfg,
                        uint64_t seed);

/// Refits only the masked blocks against new data (end-to-end loss with
/// observed joints); unmasked blocks are returned bit-identical. An empty
/// mask returns the input unchanged.
ModelParams relearn(const ModelParams& params, const FreeVariables& mask, const Dataset& new_data,
                    const OptimizerConfig& cfg, uint64_t seed);

/// Mean L2 pixel distance per observed feature over the dataset's joints
/// records, generating through the full model.
double evaluate_average_pixel_norm(const ModelParams& model, const Dataset& data);

/// Full-chain reprojection loss (sum of squared pixel residuals) against a
/// dataset's joints records.
double evaluate_e2e_loss(const ModelParams& model, const Dataset& data);

}  // namespace viskin
