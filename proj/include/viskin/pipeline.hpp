#pragma once

#include <string>
#include <vector>

#include "viskin/bootstrap.hpp"
#include "viskin/learning.hpp"

namespace viskin {

struct StagedTrainOptions {
  int stage_iterations = 200;
  int polish_iterations = 300;  // extra full-data iterations after the final stage
  // Stages re-run in stage_iterations chunks while the loss keeps falling;
  // disable for fixed-budget protocol comparisons.
  bool adaptive_stages = true;
  int restarts = 0;      // 0 = auto: 5 for multi-camera, 20 for the single-camera SfM path
  double lambda = -1.0;  // < 0 selects from {0.1, 1, 10, 100} on a held-out split
  std::vector<Intrinsics> intrinsics_guess;  // empty = nominal factory intrinsics
  uint64_t seed = 0;
  double convergence_threshold_px = 10.0;
};

struct StageReport {
  std::string name;
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> curve;
};

struct TrainReport {
  std::string regime;
  int restarts = 0;
  double wall_time_s = 0.0;
  double lambda = 0.0;
  double final_train_loss = 0.0;
  double final_train_avg_px = 0.0;
  bool converged = false;
  std::vector<StageReport> stages;
};

struct StagedTrainResult {
  ModelParams model;
  Latents latents;
  TrainReport report;
};

/// The nominal factory intrinsics of the simulated camera family; stands in
/// for a vendor-provided calibration as the bootstrap guess.
Intrinsics factory_intrinsics_guess();

/// The full staged pipeline: bootstrap initialization (two-view
/// triangulation, falling back to incremental SfM for a single camera),
/// camera/structure stage, kinematics stage from random initialization, then
/// the end-to-end (or noise/action) stage. The Cartesian-action and
/// noisy-pose regimes run a similarity pre-alignment between stages. Best of
/// `restarts` seeded restarts; ties go to the lowest restart index.
StagedTrainResult staged_train(const Dataset& data, const StagedTrainOptions& opt = {});

/// staged_train that throws ConvergenceFailure when the final train average
/// pixel norm stays above the threshold after all restarts.
StagedTrainResult staged_train_checked(const Dataset& data, const StagedTrainOptions& opt = {});

/// Levenberg-Marquardt bundle refinement of a bootstrap estimate (cameras,
/// structure, covered poses) with the per-pose blocks Schur-eliminated;
/// pulls the initialization essentially onto the camera/structure optimum
/// before the L-BFGS stages run.
void refine_init_bundle(ModelParams* model, Latents* latents, const TrainingData& td,
                        const std::vector<int>& covered, int max_iterations = 30);

}  // namespace viskin
