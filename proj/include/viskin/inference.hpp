#pragma once

#include <deque>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "viskin/learning.hpp"
#include "viskin/simulator.hpp"

namespace viskin {

// ---------------------------------------------------------------------------
// Pose and joint inference
// ---------------------------------------------------------------------------

struct PnpOptions {
  int cold_starts = 8;
  int max_iterations = 150;
  double max_avg_residual_px = 10.0;
  uint64_t seed = 0;
};

/// End-effector pose minimizing the multi-camera reprojection error of the
/// model's structure against the observation. Initialized from `warm_start`
/// when given, otherwise from several deterministic cold starts.
Pose infer_pose_from_image(const ModelParams& model, const Observation& obs,
                           const PnpOptions& opt = {}, const Pose* warm_start = nullptr);

struct IkOptions {
  double residual_tol = 1e-6;    // Frobenius pose error of an accepted solution
  double dedup_tol = 1e-3;       // joint-space distance (wrapped) treated as the same solution
  int max_iterations = 200;
};

/// Local IK minimizations from each seed; deduplicated solutions sorted by
/// residual. An empty result signals an unreachable target.
std::vector<JointVector> infer_joints_from_pose(const ModelParams& model, const Pose& target,
                                                const std::vector<JointVector>& seeds,
                                                const IkOptions& opt = {});

std::vector<JointVector> default_ik_seeds(int dof, int count, uint64_t seed);

/// The solution most consistent with the actions taken so far: argmin of the
/// squared joint distance to (previous estimate + last action); ties go to
/// the lowest index.
JointVector select_joint_solution(const std::vector<JointVector>& solutions,
                                  const std::vector<JointVector>& action_history,
                                  const JointVector& j_prev_estimate);

/// Local joint tracking: refines the joint estimate directly against the
/// observed pixels from a seed, staying inside the seed's basin (no branch
/// hopping). Returns the refined joints and the average pixel residual.
std::pair<JointVector, double> refine_joints_on_image(const ModelParams& model,
                                                      const Observation& obs,
                                                      const JointVector& seed,
                                                      int iterations = 60);

// ---------------------------------------------------------------------------
// Servo loop
// ---------------------------------------------------------------------------

enum class ServoStatus { kConverged, kMaxIterations, kStalled };

struct ServoTraceRow {
  int iter = 0;
  double avg_pixel_norm = 0.0;
  std::vector<double> cam_residuals;
  JointVector commanded;  // joint delta (or 6-vector xyz/rpy for Cartesian control)
};

struct ServoTrace {
  std::vector<ServoTraceRow> rows;
  ServoStatus status = ServoStatus::kMaxIterations;

  int iterations() const { return static_cast<int>(rows.size()); }
  double final_error() const { return rows.empty() ? 0.0 : rows.back().avg_pixel_norm; }
  /// `iter,avg_pixel_norm,cam0_resid,cam1_resid,...`
  std::string to_csv(int camera_count) const;
};

struct ServoConfig {
  int max_iters = 30;
  double pixel_tol = 1.0;
  bool cartesian = false;  // command pose deltas instead of joint deltas
  int stall_window = 5;
  uint64_t seed = 0;
  // Joint-state estimate at servo start (the state-tracking context a live
  // system always has). Empty = cold multi-start, which can pick an
  // arbitrary IK branch for the first command.
  JointVector initial_joint_estimate;
  // Joint configurations the model was trained on. Used to seed the target
  // IK and to prefer solutions inside the envelope where the model is valid
  // (action-only models are local by construction).
  std::vector<JointVector> joint_prior;
};

/// Repeated infer-current / command-delta cycle against the target image.
/// The target joints (or pose) are inferred once; each iteration infers the
/// current state from the image and commands the difference. No step-size
/// hyperparameter.
ServoTrace servo_loop(const ModelParams& model, SimulatedPlant& plant,
                      const Observation& target_obs, const ServoConfig& cfg = {});

/// Pixel error between two observations over their common features, averaged
/// per feature (and per camera for the residual vector).
double servo_pixel_error(const Observation& current, const Observation& target);
std::vector<double> per_camera_pixel_error(const Observation& current, const Observation& target);

// ---------------------------------------------------------------------------
// Structure-stretch waypoints
// ---------------------------------------------------------------------------

struct StretchWaypoint {
  double factor = 1.0;
  Structure structure;
  JointVector joints;
};

/// Grasp/insertion approach schedule: per factor, the object features are
/// scaled about the arm-feature centroid and the joint target re-inferred
/// against the goal pixels of the object features. Factors must end at 1.0.
std::vector<StretchWaypoint> stretch_waypoints(const ModelParams& model,
                                               const std::vector<int>& object_feature_ids,
                                               const Observation& target_obs,
                                               const JointVector& current_joints,
                                               const std::vector<double>& factors = {1.4, 1.3, 1.2,
                                                                                     1.1, 1.0});

// ---------------------------------------------------------------------------
// Online learning and change-point detection
// ---------------------------------------------------------------------------

struct OnlineSample {
  JointVector joints;
  Observation observation;
};

/// Ring buffer of recent (joints, observation) samples.
class OnlineBuffer {
 public:
  explicit OnlineBuffer(int capacity = 50) : capacity_(capacity) {}

  void push(const JointVector& joints, const Observation& obs) {
    samples_.push_back({joints, obs});
    if (static_cast<int>(samples_.size()) > capacity_) samples_.pop_front();
  }
  int size() const { return static_cast<int>(samples_.size()); }
  int capacity() const { return capacity_; }
  const std::deque<OnlineSample>& samples() const { return samples_; }

 private:
  int capacity_;
  std::deque<OnlineSample> samples_;
};

struct OnlineConfig {
  double grad_norm_threshold = 1.0;
  double spike_ratio = 10.0;
  int refine_iterations = 20;
  double baseline_floor = 1e-6;
};

/// Gradient norm of the end-to-end loss over the buffer, per parameter
/// block. Block order: kinematics, structure, then one entry per camera.
struct BlockGradients {
  double total = 0.0;
  double kinematics = 0.0;
  double structure = 0.0;
  std::vector<double> cameras;
};

BlockGradients buffer_gradient_norms(const OnlineBuffer& buffer, const ModelParams& model);

/// One bounded refinement on the buffer when the gradient norm exceeds the
/// threshold; otherwise the model is returned unchanged. Returns the updated
/// model and the pre-update gradient norm.
std::pair<ModelParams, double> online_update(const OnlineBuffer& buffer, const ModelParams& model,
                                             const OnlineConfig& cfg = {});

enum class ChangeKind { kNone, kCamera, kStructure, kKinematics };

struct ChangeReport {
  ChangeKind kind = ChangeKind::kNone;
  int camera_id = -1;
  double ratio = 0.0;  // gradient-norm spike relative to the baseline
};

/// Flags a setup change when the buffer gradient norm spikes past
/// `spike_ratio` times the pre-change baseline, attributing it to the
/// parameter block with the largest normalized gradient-norm ratio.
ChangeReport detect_change(const OnlineBuffer& buffer, const ModelParams& model,
                           const BlockGradients& baseline, const OnlineConfig& cfg = {});

/// Tracks the rolling pre-change baseline and the set of cameras excluded
/// from inference until relearned.
class OnlineMonitor {
 public:
  OnlineMonitor(int buffer_capacity = 50, const OnlineConfig& cfg = {})
      : buffer_(buffer_capacity), cfg_(cfg) {}

  OnlineBuffer& buffer() { return buffer_; }
  const OnlineBuffer& buffer() const { return buffer_; }

  /// Updates the rolling baseline from the current (assumed healthy) state.
  void observe_baseline(const ModelParams& model);

  ChangeReport check(const ModelParams& model) const;

  void exclude_camera(int id) { excluded_.insert(id); }
  void clear_exclusion(int id) { excluded_.erase(id); }
  const std::set<int>& excluded_cameras() const { return excluded_; }

  /// Observation with the excluded cameras' features removed.
  Observation filter(const Observation& obs) const;

 private:
  OnlineBuffer buffer_;
  OnlineConfig cfg_;
  BlockGradients baseline_;
  bool has_baseline_ = false;
  std::set<int> excluded_;
};

}  // namespace viskin
