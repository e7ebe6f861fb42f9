#include "viskin/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <future>
#include <numeric>

#include "viskin/ibvs.hpp"
#include "viskin/inference.hpp"
#include "viskin/pipeline.hpp"
#include "viskin/svg.hpp"

namespace viskin {

Json MetricsReport::to_json() const {
  Json out;
  out["schema_version"] = 1;
  out["experiment"] = experiment;
  out["config"] = config;
  out["trials"] = trials;
  out["aggregate"] = aggregate;
  out["artifacts"] = artifacts;
  out["wall_time_s"] = wall_time_s;
  return out;
}

Json aggregate_trials(const std::vector<Json>& trials) {
  std::map<std::string, std::vector<double>> columns;
  for (const Json& t : trials)
    for (auto it = t.begin(); it != t.end(); ++it)
      if (it.value().is_number()) columns[it.key()].push_back(it.value().get<double>());
  Json out;
  for (const auto& [name, values] : columns) {
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    Json col;
    col["mean"] = mean;
    col["std"] = std::sqrt(var / n);
    col["count"] = values.size();
    out[name] = col;
  }
  return out;
}

namespace {

namespace fs = std::filesystem;

struct Artifacts {
  const ExperimentConfig* cfg;
  MetricsReport* report;

  void write(const std::string& name, const std::string& content) const {
    if (cfg->out_dir.empty()) return;
    fs::create_directories(cfg->out_dir);
    write_text_file((fs::path(cfg->out_dir) / name).string(), content);
    report->artifacts.push_back(name);
  }
  void plot(const std::string& base, const std::vector<PlotSeries>& series, const PlotSpec& spec,
            const std::string& x_name) const {
    write(base + ".csv", series_to_csv(x_name, series));
    write(base + ".svg", render_svg_plot(series, spec));
  }
};

Json config_json(const ExperimentConfig& cfg) {
  Json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["trials"] = cfg.trials;
  j["samples"] = cfg.samples;
  j["k"] = cfg.k;
  j["noise"] = cfg.noise;
  return j;
}

/// Runs one closure per trial with pre-assigned seeds; trials are
/// independent and may run on a worker pool without changing results.
std::vector<Json> run_trials(const ExperimentConfig& cfg, int count,
                             const std::function<Json(int, uint64_t)>& trial) {
  std::vector<Json> rows(count);
  if (cfg.jobs <= 1) {
    for (int i = 0; i < count; ++i) rows[i] = trial(i, mix_seed(cfg.seed, 1000 + i));
    return rows;
  }
  std::vector<std::future<Json>> futures;
  futures.reserve(count);
  for (int i = 0; i < count; ++i)
    futures.push_back(std::async(std::launch::async, trial, i, mix_seed(cfg.seed, 1000 + i)));
  for (int i = 0; i < count; ++i) rows[i] = futures[i].get();
  return rows;
}

double avg_px_at_joints(const ModelParams& model, const Dataset& data, bool use_noisy) {
  double total = 0.0;
  int count = 0;
  for (const DatasetRecord& rec : data.records) {
    const auto& j = use_noisy ? rec.noisy_joints : rec.joints;
    if (!j) throw UsageError("record lacks the requested joints field");
    const Observation gen = generate_observation_all(model, *j);
    for (int i = 0; i < rec.observation.camera_count(); ++i)
      for (const PixelFeature& f : rec.observation.cams[i]) {
        const auto& cam = gen.cams.at(i);
        const auto it = std::find_if(cam.begin(), cam.end(),
                                     [&](const PixelFeature& g) { return g.id == f.id; });
        total += std::hypot(it->u - f.u, it->v - f.v);
        ++count;
      }
  }
  return count > 0 ? total / count : 0.0;
}

JointVector random_visible_config(const GroundTruthWorld& world, Rng& rng, int min_features = 8) {
  for (int tries = 0; tries < 500; ++tries) {
    JointVector j(world.kin.dof());
    for (int i = 0; i < j.size(); ++i) j[i] = rng.uniform(-M_PI / 2, M_PI / 2);
    const Observation obs = capture(world, j);
    int shared = 0;
    if (obs.camera_count() >= 2)
      for (const PixelFeature& f : obs.cams[0])
        for (const PixelFeature& g : obs.cams[1])
          if (g.id == f.id) {
            ++shared;
            break;
          }
    if (shared >= min_features) return j;
  }
  throw std::logic_error("could not sample a visible configuration");
}

// ---------------------------------------------------------------------------
// IBVS servo driver (baseline side of the comparison)
// ---------------------------------------------------------------------------

// Stereo-triangulated depths in camera 0's frame for the features the two
// ground-truth cameras share.
std::vector<IbvsFeature> stereo_features(const GroundTruthWorld& world, const Observation& obs) {
  std::vector<IbvsFeature> out;
  if (obs.camera_count() < 2) return out;
  const Pose e0 = world.cameras[0].extrinsic_pose();
  for (const PixelFeature& f : obs.cams[0]) {
    const auto it = std::find_if(obs.cams[1].begin(), obs.cams[1].end(),
                                 [&](const PixelFeature& g) { return g.id == f.id; });
    if (it == obs.cams[1].end()) continue;
    try {
      const Eigen::Vector3d x = triangulate(
          {{world.cameras[0], f.u, f.v}, {world.cameras[1], it->u, it->v}});
      const double z = e0.apply(x).z();
      if (z > 0) out.push_back({f.id, f.u, f.v, z});
    } catch (const DegenerateGeometry&) {
    }
  }
  return out;
}

struct IbvsRunResult {
  std::vector<double> errors;  // avg pixel norm after each commanded step
  int iters_to_tol = -1;       // -1 = never reached
};

IbvsRunResult run_ibvs_servo(const GroundTruthWorld& world, SimulatedPlant& plant,
                             const Observation& target_obs, double gamma, int max_iters,
                             double tol, double joint_read_sigma = 0.0, uint64_t seed = 0) {
  IbvsRunResult result;
  const std::vector<IbvsFeature> target = stereo_features(world, target_obs);
  IbvsConfig cfg;
  cfg.gamma = gamma;
  Rng rng(mix_seed(seed, 0x1b5));
  for (int iter = 1; iter <= max_iters; ++iter) {
    const Observation obs = plant.observe();
    const std::vector<IbvsFeature> current = stereo_features(world, obs);
    if (current.empty()) break;  // features lost, counts as failure
    // The baseline receives the ground-truth Jacobian and hand-eye chain,
    // evaluated at its (possibly noisy) joint reading.
    JointVector joints = plant.joints();
    for (int i = 0; i < joints.size(); ++i) joints[i] += rng.normal(0.0, joint_read_sigma);
    const auto jacobian = robot_jacobian(world.kin, joints);
    const Pose hand_eye =
        compose(world.cameras[0].extrinsic_pose(), forward_kinematics(world.kin, joints));
    JointVector qdot;
    try {
      qdot = ibvs_step(current, target, world.cameras[0].intrinsics, jacobian, hand_eye, cfg).qdot;
    } catch (const DimensionMismatch&) {
      break;
    }
    plant.command_joint_delta(qdot);
    const double err = servo_pixel_error(plant.observe(), target_obs);
    result.errors.push_back(err);
    if (err <= tol) {
      result.iters_to_tol = iter;
      break;
    }
  }
  return result;
}

// Mean error curve across runs, padding finished runs with their last value.
PlotSeries mean_curve(const std::string& name, const std::vector<std::vector<double>>& runs,
                      int length) {
  PlotSeries s;
  s.name = name;
  for (int i = 0; i < length; ++i) {
    double total = 0.0;
    int count = 0;
    for (const auto& run : runs) {
      if (run.empty()) continue;
      const double v = i < static_cast<int>(run.size()) ? run[i] : run.back();
      if (std::isfinite(v)) {
        total += v;
        ++count;
      }
    }
    if (count == 0) break;
    s.xs.push_back(i + 1);
    s.ys.push_back(total / count);
  }
  return s;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// Individual experiments
// ---------------------------------------------------------------------------

MetricsReport exp_e2e_ablation(const ExperimentConfig& cfg) {
  MetricsReport report;
  const int trials = cfg.trials > 0 ? cfg.trials : 5;
  report.trials = run_trials(cfg, trials, [&](int i, uint64_t seed) {
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset data = collect_random_dataset(world, cfg.samples, Regime::kJoints, seed + 1);
    StagedTrainOptions opt;
    opt.seed = seed;
    const StagedTrainResult res = staged_train(data, opt);
    Json row;
    row["trial"] = i;
    for (const StageReport& st : res.report.stages)
      if (st.name == "end_to_end") {
        row["before_e2e_loss"] = st.initial_loss;
        row["after_e2e_loss"] = st.final_loss;
        row["reduction_ratio"] = st.initial_loss / std::max(st.final_loss, 1e-300);
      }
    return row;
  });
  return report;
}

MetricsReport exp_stages(const ExperimentConfig& cfg) {
  MetricsReport report;
  report.trials = run_trials(cfg, cfg.trials > 0 ? cfg.trials : 10, [&](int i, uint64_t seed) {
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset data = collect_random_dataset(world, cfg.samples, Regime::kJoints, seed + 1);
    const TrainingData td = training_data_from_dataset(data);
    std::vector<int> all_ts(td.timesteps());
    std::iota(all_ts.begin(), all_ts.end(), 0);
    Rng rng(mix_seed(seed, 0x57a9e5));
    const int total_iters = 600;

    auto random_model = [&]() {
      ModelParams m;
      m.kin.base.xyz = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      m.kin.base.rpy = Eigen::Vector3d(rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI),
                                       rng.uniform(-M_PI, M_PI));
      m.kin.rows.resize(world.kin.dof());
      for (DHRow& row : m.kin.rows) {
        row.omega = rng.uniform(-M_PI, M_PI);
        row.d = rng.uniform(-0.5, 0.5);
        row.a = rng.uniform(-0.5, 0.5);
        row.alpha = rng.uniform(-M_PI, M_PI);
      }
      m.structure.coords.resize(3, world.structure.count());
      for (int k = 0; k < m.structure.count(); ++k)
        m.structure.coords.col(k) =
            Eigen::Vector3d(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
      m.cameras.resize(2);
      for (CameraParams& cam : m.cameras) {
        cam.intrinsics = factory_intrinsics_guess();
        cam.extrinsics.xyz = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1),
                                             rng.uniform(0.5, 2.0));
        cam.extrinsics.rpy = Eigen::Vector3d(rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI),
                                             rng.uniform(-M_PI, M_PI));
      }
      return m;
    };
    auto run_e2e = [&](ModelParams model, int iters, uint64_t s) {
      OptimizerConfig ocfg;
      ocfg.max_iterations = iters;
      ocfg.use_minibatch = true;
      ocfg.minibatch.minibatch_iterations = iters * 3 / 4;
      ocfg.minibatch.full_iterations = iters - ocfg.minibatch.minibatch_iterations;
      return minimize({LossVariant::kE2e, 0.0}, FreeVariables::all_model(2), model, {}, td, all_ts,
                      ocfg, s);
    };

    // (1) every parameter at once from random initialization.
    const double loss_all = run_e2e(random_model(), total_iters, mix_seed(seed, 1)).final_loss;

    // (2) camera + structure stage, then everything.
    double loss_two = std::numeric_limits<double>::quiet_NaN();
    {
      const auto init = init_by_triangulation(
          data, std::vector<Intrinsics>(2, factory_intrinsics_guess()));
      ModelParams model = random_model();
      for (int ci = 0; ci < 2; ++ci)
        if (init.cameras[ci]) model.cameras[ci] = *init.cameras[ci];
      Latents latents;
      latents.poses.assign(td.timesteps(), Pose6());
      for (int t : init.covered_timesteps) latents.poses[t] = from_pose(*init.poses[t]);
      FreeVariables cam_mask = FreeVariables::none(2);
      cam_mask.structure = true;
      cam_mask.cam_extrinsics.assign(2, true);
      cam_mask.cam_intrinsics.assign(2, true);
      cam_mask.latent_poses = true;
      OptimizerConfig ocfg;
      ocfg.max_iterations = total_iters / 2;
      const MinimizeResult stage1 =
          minimize({LossVariant::kCam, 0.0}, cam_mask, model, latents, td,
                   init.covered_timesteps, ocfg, mix_seed(seed, 2));
      loss_two = run_e2e(stage1.model, total_iters / 2, mix_seed(seed, 3)).final_loss;
    }

    // (3) the full three-stage pipeline at the same total budget.
    StagedTrainOptions opt;
    opt.seed = seed;
    opt.stage_iterations = total_iters / 3;
    opt.polish_iterations = 0;  // keep the three arms at an equal budget
    opt.adaptive_stages = false;
    opt.restarts = 1;
    const StagedTrainResult staged = staged_train(data, opt);

    Json row;
    row["trial"] = i;
    row["loss_single_stage"] = loss_all;
    row["loss_two_stage"] = loss_two;
    row["loss_three_stage"] = staged.report.final_train_loss;
    row["three_stage_best"] = (staged.report.final_train_loss < loss_all &&
                               staged.report.final_train_loss < loss_two)
                                  ? 1.0
                                  : 0.0;
    return row;
  });
  return report;
}

MetricsReport exp_kfold(const ExperimentConfig& cfg) {
  MetricsReport report;
  const std::vector<int> ks = cfg.k > 0 ? std::vector<int>{cfg.k} : std::vector<int>{2, 3, 4, 5, 6};
  const int worlds = std::max(1, (cfg.trials > 0 ? cfg.trials : 10) / 5);
  std::vector<Json> rows;
  for (int w = 0; w < worlds; ++w) {
    const uint64_t seed = mix_seed(cfg.seed, 2000 + w);
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset data = collect_random_dataset(world, 200, Regime::kJoints, seed + 1);
    for (int k : ks) {
      const int fold_size = data.size() / k;
      for (int fold = 0; fold < k; ++fold) {
        Dataset train = data, val = data;
        train.records.clear();
        val.records.clear();
        for (int t = 0; t < data.size(); ++t) {
          if (t / fold_size == fold && fold * fold_size + fold_size <= data.size())
            val.records.push_back(data.records[t]);
          else
            train.records.push_back(data.records[t]);
        }
        StagedTrainOptions opt;
        opt.seed = mix_seed(seed, 10 * k + fold);
        const StagedTrainResult res = staged_train(train, opt);
        Json row;
        row["world"] = w;
        row["k"] = k;
        row["fold"] = fold;
        row["train_size"] = train.size();
        row["val_size"] = val.size();
        row["val_avg_px"] = evaluate_average_pixel_norm(res.model, val);
        rows.push_back(std::move(row));
      }
    }
  }
  report.trials = std::move(rows);
  return report;
}

MetricsReport exp_sample_efficiency(const ExperimentConfig& cfg) {
  MetricsReport report;
  const std::vector<int> sizes = {30, 40, 50, 60, 70};
  std::vector<Json> rows;
  const int se_trials = cfg.trials > 0 ? cfg.trials : 10;
  for (int i = 0; i < se_trials; ++i) {
    const uint64_t seed = mix_seed(cfg.seed, 3000 + i);
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset pool = collect_random_dataset(world, 100, Regime::kJoints, seed + 1);
    const Dataset test = collect_random_dataset(world, 100, Regime::kJoints, seed + 2);
    for (int size : sizes) {
      Dataset train = pool;
      train.records.resize(size);
      StagedTrainOptions opt;
      opt.seed = mix_seed(seed, size);
      const StagedTrainResult res = staged_train(train, opt);
      Json row;
      row["trial"] = i;
      row["train_samples"] = size;
      row["test_avg_px"] = evaluate_average_pixel_norm(res.model, test);
      rows.push_back(std::move(row));
    }
  }
  report.trials = std::move(rows);
  Artifacts art{&cfg, &report};
  std::map<int, std::vector<double>> by_size;
  for (const Json& r : report.trials)
    by_size[r["train_samples"].get<int>()].push_back(r["test_avg_px"].get<double>());
  PlotSeries s;
  s.name = "median test px";
  for (const auto& [size, errs] : by_size) {
    s.xs.push_back(size);
    s.ys.push_back(median(errs));
  }
  art.plot("sample_efficiency", {s}, {"Test error vs training samples", "training samples",
                                      "avg pixel norm", true, false},
           "train_samples");
  return report;
}

MetricsReport exp_single_camera_inference(const ExperimentConfig& cfg) {
  MetricsReport report;
  report.trials = run_trials(cfg, cfg.trials > 0 ? cfg.trials : 10, [&](int i, uint64_t seed) {
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset data = collect_random_dataset(world, cfg.samples, Regime::kJoints, seed + 1);
    StagedTrainOptions opt;
    opt.seed = seed;
    const StagedTrainResult res = staged_train(data, opt);
    const ModelParams& model = res.model;

    Rng rng(mix_seed(seed, 0xe7a1));
    double joint_both = 0, joint_single = 0, reproj_both = 0, reproj_single = 0;
    const int configs = 20;
    JointVector tracking = world.home();
    for (int n = 0; n < configs; ++n) {
      const JointVector j_true = random_visible_config(world, rng);
      const Observation obs = capture(world, j_true);
      auto infer = [&](const Observation& o) {
        const Pose pose = infer_pose_from_image(model, o);
        std::vector<JointVector> seeds = {tracking};
        const auto extra = default_ik_seeds(6, 16, mix_seed(seed, n));
        seeds.insert(seeds.end(), extra.begin(), extra.end());
        const auto sols = infer_joints_from_pose(model, pose, seeds);
        if (sols.empty()) throw ConvergenceFailure("IK failed during evaluation");
        const JointVector j = select_joint_solution(sols, {}, tracking);
        double total = 0;
        int count = 0;
        const Observation gen = generate_observation_all(model, j);
        for (int ci = 0; ci < obs.camera_count(); ++ci)
          for (const PixelFeature& f : obs.cams[ci]) {
            const auto& cam = gen.cams[ci];
            const auto it = std::find_if(cam.begin(), cam.end(),
                                         [&](const PixelFeature& g) { return g.id == f.id; });
            total += std::hypot(it->u - f.u, it->v - f.v);
            ++count;
          }
        return std::make_pair(j, total / std::max(count, 1));
      };
      const auto [jb, rb] = infer(obs);
      Observation single = obs;
      for (int ci = 1; ci < single.camera_count(); ++ci) single.cams[ci].clear();
      const auto [js, rs] = infer(single);
      joint_both += (jb - j_true).norm();
      joint_single += (js - j_true).norm();
      reproj_both += rb;
      reproj_single += rs;
      tracking = j_true;  // tracked motion: next inference seeds from here
    }
    Json row;
    row["trial"] = i;
    row["both_joint_err"] = joint_both / configs;
    row["single_joint_err"] = joint_single / configs;
    row["both_reproj_px"] = reproj_both / configs;
    row["single_reproj_px"] = reproj_single / configs;
    return row;
  });
  return report;
}

MetricsReport exp_single_camera_training(const ExperimentConfig& cfg) {
  MetricsReport report;
  report.trials = run_trials(cfg, cfg.trials > 0 ? cfg.trials : 10, [&](int i, uint64_t seed) {
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset stereo = collect_random_dataset(world, cfg.samples, Regime::kJoints, seed + 1);
    const Dataset test = collect_random_dataset(world, 100, Regime::kJoints, seed + 2);
    // Single-camera copies: drop every camera but the first.
    auto drop_to_single = [](Dataset d) {
      for (DatasetRecord& rec : d.records) rec.observation.cams.resize(1);
      return d;
    };
    const Dataset mono = drop_to_single(stereo);
    const Dataset mono_test = drop_to_single(test);

    // (a) two-camera triangulation init, single-camera learning.
    double two_cam_init_px = std::numeric_limits<double>::quiet_NaN();
    {
      const auto init = init_by_triangulation(
          stereo, std::vector<Intrinsics>(2, factory_intrinsics_guess()));
      const TrainingData td = training_data_from_dataset(mono);
      std::vector<int> all_ts(td.timesteps());
      std::iota(all_ts.begin(), all_ts.end(), 0);
      Rng rng(mix_seed(seed, 0x2ca3));
      ModelParams model;
      model.kin.rows.resize(world.kin.dof());
      model.structure.coords.resize(3, world.structure.count());
      for (int k = 0; k < model.structure.count(); ++k)
        model.structure.coords.col(k) =
            Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * init.feature_spread * 0.5;
      model.cameras = {init.cameras[0] ? *init.cameras[0]
                                       : CameraParams{factory_intrinsics_guess(), Pose6()}};
      Latents latents;
      latents.poses.assign(td.timesteps(), Pose6());
      for (int t : init.covered_timesteps) latents.poses[t] = from_pose(*init.poses[t]);
      FreeVariables cam_mask = FreeVariables::none(1);
      cam_mask.structure = true;
      cam_mask.cam_extrinsics = {true};
      cam_mask.cam_intrinsics = {true};
      cam_mask.latent_poses = true;
      OptimizerConfig ocfg;
      ocfg.max_iterations = 200;
      const MinimizeResult st1 = minimize({LossVariant::kCam, 0.0}, cam_mask, model, latents,
                                          td, init.covered_timesteps, ocfg, mix_seed(seed, 5));
      // Kinematics + end-to-end on the single-camera data.
      TrainingData td_kin = td;
      td_kin.poses_obs.assign(td.timesteps(), Pose());
      for (int t : init.covered_timesteps) td_kin.poses_obs[t] = to_pose(st1.latents.poses[t]);
      FreeVariables kin_mask = FreeVariables::none(1);
      kin_mask.base = kin_mask.dh = true;
      ModelParams best;
      double best_loss = std::numeric_limits<double>::infinity();
      for (int p = 0; p < 8; ++p) {
        ModelParams cand = st1.model;
        Rng krng(mix_seed(seed, 600 + p));
        cand.kin.base.xyz = Eigen::Vector3d(krng.uniform(-1.5, 1.5), krng.uniform(-1.5, 1.5),
                                            krng.uniform(-1.5, 1.5));
        cand.kin.base.rpy = Eigen::Vector3d(krng.uniform(-M_PI, M_PI), krng.uniform(-M_PI, M_PI),
                                            krng.uniform(-M_PI, M_PI));
        for (DHRow& row : cand.kin.rows) {
          row.omega = krng.uniform(-M_PI, M_PI);
          row.d = krng.uniform(-0.5, 0.5);
          row.a = krng.uniform(-0.5, 0.5);
          row.alpha = krng.uniform(-M_PI, M_PI);
        }
        OptimizerConfig kcfg;
        kcfg.max_iterations = 200;
        kcfg.use_minibatch = true;
        const MinimizeResult kin_res = minimize({LossVariant::kKin, 0.0}, kin_mask, cand, {},
                                                td_kin, init.covered_timesteps, kcfg,
                                                mix_seed(seed, 700 + p));
        if (kin_res.final_loss < best_loss) {
          best_loss = kin_res.final_loss;
          best = kin_res.model;
        }
      }
      OptimizerConfig ecfg;
      ecfg.max_iterations = 200;
      ecfg.use_minibatch = true;
      FreeVariables e2e_mask = FreeVariables::all_model(1);
      const MinimizeResult e2e = minimize({LossVariant::kE2e, 0.0}, e2e_mask, best, {}, td,
                                          all_ts, ecfg, mix_seed(seed, 6));
      two_cam_init_px = evaluate_average_pixel_norm(e2e.model, mono_test);
    }

    // (b) the single-camera pipeline with its SfM initialization.
    StagedTrainOptions opt;
    opt.seed = seed;
    const StagedTrainResult sfm = staged_train(mono, opt);
    Json row;
    row["trial"] = i;
    row["two_cam_init_test_px"] = two_cam_init_px;
    row["sfm_init_test_px"] = evaluate_average_pixel_norm(sfm.model, mono_test);
    return row;
  });
  return report;
}

// Shared scaffolding for the relearning studies: start from the converged
// (ground-truth) model of a modified world and refit one block from a
// handful of fresh samples.
MetricsReport relearn_experiment(const ExperimentConfig& cfg, const std::string& variant) {
  MetricsReport report;
  std::vector<Json> rows;
  const std::vector<int> sample_counts = variant == "kinematics"
                                             ? std::vector<int>{2, 5, 10, 20, 40, 70, 100}
                                             : std::vector<int>{1, 2, 3, 4, 5, 6, 8, 10};
  const int trials = cfg.trials > 0 ? std::min(cfg.trials, 10) : 3;
  for (int i = 0; i < trials; ++i) {
    const uint64_t seed = mix_seed(cfg.seed, 4000 + i);
    GroundTruthWorld world = make_default_world(seed);
    Rng rng(mix_seed(seed, 0x6e1ea6));

    GroundTruthWorld modified = world;
    ModelParams model = ground_truth_model(world);
    FreeVariables mask = FreeVariables::none(static_cast<int>(world.cameras.size()));
    if (variant == "camera-added") {
      const Pose home = forward_kinematics(world.kin, world.home());
      const Eigen::Vector3d center = apply_structure(world.structure, home).rowwise().mean();
      const double az = rng.uniform(0, 2 * M_PI);
      const Eigen::Vector3d pos =
          center + 1.5 * Eigen::Vector3d(std::cos(az), std::sin(az), 0.8).normalized();
      modified.cameras.push_back(make_lookat_camera(pos, center, factory_intrinsics_guess()));
      model = ground_truth_model(modified);
      model.cameras[2].extrinsics.xyz =
          Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 2));
      model.cameras[2].extrinsics.rpy = Eigen::Vector3d(
          rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI), rng.uniform(-M_PI, M_PI));
      mask = FreeVariables::none(3);
      mask.cam_extrinsics[2] = true;
      mask.cam_intrinsics[2] = true;
    } else if (variant == "camera-moved") {
      Pose6 e = modified.cameras[1].extrinsics;
      e.xyz += Eigen::Vector3d(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                               rng.uniform(-0.2, 0.2));
      e.rpy += Eigen::Vector3d(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
                               rng.uniform(-0.15, 0.15));
      modified.cameras[1].extrinsics = e;
      mask.cam_extrinsics[1] = true;
      mask.cam_intrinsics[1] = true;
    } else if (variant == "structure") {
      for (int k = 0; k < modified.structure.count(); ++k)
        modified.structure.coords.col(k) = Eigen::Vector3d(
            rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
      mask.structure = true;
      // New markers: random initialization.
      for (int k = 0; k < model.structure.count(); ++k)
        model.structure.coords.col(k) = Eigen::Vector3d(
            rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    } else if (variant == "base") {
      modified.kin.base.xyz += Eigen::Vector3d(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                                               rng.uniform(-0.1, 0.1));
      modified.kin.base.rpy += Eigen::Vector3d(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                               rng.uniform(-0.2, 0.2));
      mask.base = true;
    } else {  // kinematics
      mask.base = true;
      mask.dh = true;
      Rng krng(mix_seed(seed, 0x7e4));
      model.kin.base.xyz = Eigen::Vector3d(krng.uniform(-1, 1), krng.uniform(-1, 1),
                                           krng.uniform(-1, 1));
      model.kin.base.rpy = Eigen::Vector3d(krng.uniform(-M_PI, M_PI), krng.uniform(-M_PI, M_PI),
                                           krng.uniform(-M_PI, M_PI));
      for (DHRow& row : model.kin.rows) {
        row.omega = krng.uniform(-M_PI, M_PI);
        row.d = krng.uniform(-0.5, 0.5);
        row.a = krng.uniform(-0.5, 0.5);
        row.alpha = krng.uniform(-M_PI, M_PI);
      }
    }

    const Dataset pool =
        collect_random_dataset(modified, sample_counts.back(), Regime::kJoints, seed + 7);
    const Dataset test = collect_random_dataset(modified, 50, Regime::kJoints, seed + 8);
    for (int k : sample_counts) {
      Dataset subset = pool;
      subset.records.resize(k);
      OptimizerConfig ocfg;
      ocfg.max_iterations = 150;
      ocfg.restarts = variant == "kinematics" || variant == "camera-added" ? 8 : 3;
      // Restarts re-randomize nothing here; give each a jittered init instead.
      ModelParams best;
      double best_px = std::numeric_limits<double>::infinity();
      for (int r = 0; r < ocfg.restarts; ++r) {
        ModelParams init = model;
        if (r > 0) {
          Rng jrng(mix_seed(seed, 900 + 31 * k + r));
          auto jitter = [&](Pose6& p, double s_t, double s_r) {
            p.xyz += Eigen::Vector3d(jrng.normal(0, s_t), jrng.normal(0, s_t), jrng.normal(0, s_t));
            p.rpy += Eigen::Vector3d(jrng.normal(0, s_r), jrng.normal(0, s_r), jrng.normal(0, s_r));
          };
          if (mask.base) jitter(init.kin.base, 0.3, 0.8);
          if (mask.dh)
            for (DHRow& row : init.kin.rows) {
              row.omega += jrng.normal(0, 0.8);
              row.d += jrng.normal(0, 0.2);
              row.a += jrng.normal(0, 0.2);
              row.alpha += jrng.normal(0, 0.8);
            }
          if (mask.structure)
            init.structure.coords += 0.05 * Eigen::Matrix3Xd::Random(3, init.structure.count());
          for (size_t ci = 0; ci < mask.cam_extrinsics.size(); ++ci)
            if (mask.cam_extrinsics[ci]) jitter(init.cameras[ci].extrinsics, 0.5, 1.0);
        }
        OptimizerConfig one = ocfg;
        one.restarts = 1;
        const ModelParams refit = relearn(init, mask, subset, one, mix_seed(seed, 77 + r));
        const double px = evaluate_average_pixel_norm(refit, test);
        if (px < best_px) {
          best_px = px;
          best = refit;
        }
      }
      Json row;
      row["trial"] = i;
      row["samples"] = k;
      row["test_avg_px"] = best_px;
      rows.push_back(std::move(row));
    }
  }
  report.trials = std::move(rows);
  Artifacts art{&cfg, &report};
  std::map<int, std::vector<double>> by_k;
  for (const Json& r : report.trials)
    by_k[r["samples"].get<int>()].push_back(r["test_avg_px"].get<double>());
  PlotSeries s;
  s.name = "median test px";
  for (const auto& [k, errs] : by_k) {
    s.xs.push_back(k);
    s.ys.push_back(median(errs));
  }
  art.plot("relearn_" + variant, {s},
           {"Relearning " + variant, "samples", "avg pixel norm", true, false}, "samples");
  return report;
}

MetricsReport exp_servo_compare(const ExperimentConfig& cfg, bool noisy) {
  MetricsReport report;
  const uint64_t seed = cfg.seed;
  const double sigma = cfg.noise >= 0 ? cfg.noise : (noisy ? 0.02 : 0.0);
  NoiseConfig noise;
  if (noisy) {
    noise.joint_read_sigma = sigma;
    noise.joint_action_sigma = sigma;
  }
  const GroundTruthWorld world = make_default_world(seed, noise);

  ModelParams model;
  if (noisy) {
    const Dataset data = collect_random_dataset(world, cfg.samples, Regime::kNoisyJoints, seed + 1);
    StagedTrainOptions opt;
    opt.seed = seed;
    model = staged_train(data, opt).model;
  } else {
    const Dataset data = collect_random_dataset(world, cfg.samples, Regime::kJoints, seed + 1);
    StagedTrainOptions opt;
    opt.seed = seed;
    model = staged_train(data, opt).model;
  }

  const int targets = cfg.trials > 0 ? cfg.trials : 100;
  const std::vector<double> gammas = {0.1, 0.25, 0.5, 1.0};
  const int ibvs_max = 100, learned_max = noisy ? 40 : 20;
  std::vector<std::vector<double>> learned_runs;
  std::map<double, std::vector<std::vector<double>>> ibvs_runs;
  std::vector<double> learned_iters;
  std::map<double, std::vector<double>> ibvs_iters;

  Rng rng(mix_seed(seed, 0x5e6f0));
  std::vector<Json> rows;
  for (int n = 0; n < targets; ++n) {
    const JointVector start = random_visible_config(world, rng);
    const JointVector goal = random_visible_config(world, rng);
    const Observation target_obs = capture(world, goal);

    Json row;
    row["target"] = n;
    {
      SimulatedPlant plant(world, start, mix_seed(seed, 70000 + n));
      ServoConfig scfg;
      scfg.max_iters = learned_max;
      scfg.pixel_tol = 1.0;
      scfg.seed = mix_seed(seed, 71000 + n);
      scfg.initial_joint_estimate = start;  // joints-observed regime: state is tracked
      if (noisy) {
        Rng jr(mix_seed(seed, 74000 + n));
        for (int ji = 0; ji < scfg.initial_joint_estimate.size(); ++ji)
          scfg.initial_joint_estimate[ji] += jr.normal(0.0, sigma);
      }
      try {
        const ServoTrace trace = servo_loop(model, plant, target_obs, scfg);
        std::vector<double> errs;
        for (const auto& r : trace.rows) errs.push_back(r.avg_pixel_norm);
        learned_runs.push_back(errs);
        const double iters = trace.status == ServoStatus::kConverged
                                 ? trace.iterations()
                                 : std::numeric_limits<double>::infinity();
        learned_iters.push_back(iters);
        row["learned_iters_to_1px"] = std::isfinite(iters) ? iters : -1.0;
      } catch (const std::runtime_error&) {
        learned_iters.push_back(std::numeric_limits<double>::infinity());
        row["learned_iters_to_1px"] = -1.0;
      }
    }
    for (double gamma : gammas) {
      SimulatedPlant plant(world, start, mix_seed(seed, 72000 + n));
      const IbvsRunResult res =
          run_ibvs_servo(world, plant, target_obs, gamma, ibvs_max, 1.0,
                         noisy ? sigma : 0.0, mix_seed(seed, 73000 + n));
      ibvs_runs[gamma].push_back(res.errors);
      const double iters =
          res.iters_to_tol > 0 ? res.iters_to_tol : std::numeric_limits<double>::infinity();
      ibvs_iters[gamma].push_back(iters);
      row["ibvs_g" + std::to_string(gamma).substr(0, 4) + "_iters"] =
          std::isfinite(iters) ? iters : -1.0;
    }
    rows.push_back(std::move(row));
  }
  report.trials = std::move(rows);

  auto finite_median = [&](std::vector<double> v) {
    const double m = median(std::move(v));
    return std::isfinite(m) ? m : -1.0;  // -1 = median run never reached tolerance
  };
  Json extra;
  extra["learned_median_iters"] = finite_median(learned_iters);
  for (double gamma : gammas)
    extra["ibvs_median_iters_g" + std::to_string(gamma).substr(0, 4)] =
        finite_median(ibvs_iters[gamma]);
  report.aggregate = extra;  // merged with column stats by the caller

  Artifacts art{&cfg, &report};
  std::vector<PlotSeries> series;
  series.push_back(mean_curve("learned", learned_runs, learned_max));
  for (double gamma : gammas)
    series.push_back(
        mean_curve("ibvs g=" + std::to_string(gamma).substr(0, 4), ibvs_runs[gamma], ibvs_max));
  art.plot(noisy ? "servo_compare_noisy" : "servo_compare", series,
           {"Servoing pixel error vs iterations", "iteration", "avg pixel norm", true, false},
           "iteration");
  return report;
}

MetricsReport exp_noisy_state(const ExperimentConfig& cfg) {
  MetricsReport report;
  const std::vector<double> sigmas =
      cfg.noise >= 0 ? std::vector<double>{cfg.noise} : std::vector<double>{0.01, 0.02, 0.03};
  std::vector<Json> rows;
  for (double sigma : sigmas) {
    const int ns_trials = cfg.trials > 0 ? cfg.trials : 10;
    for (int i = 0; i < ns_trials; ++i) {
      const uint64_t seed = mix_seed(cfg.seed, 5000 + i + static_cast<int>(sigma * 1000));
      NoiseConfig noise;
      noise.joint_read_sigma = sigma;
      const GroundTruthWorld world = make_default_world(seed, noise);
      const Dataset data =
          collect_random_dataset(world, cfg.samples, Regime::kNoisyJoints, seed + 1);
      const GroundTruthWorld clean_world = make_default_world(seed);  // same params, no noise
      const Dataset test = collect_random_dataset(clean_world, 100, Regime::kJoints, seed + 2);

      // Noise-aware training (joint latents with the consistency penalty).
      StagedTrainOptions aware_opt;
      aware_opt.seed = seed;
      const StagedTrainResult aware = staged_train(data, aware_opt);

      // Noise-ignorant baseline: the noisy readings treated as exact.
      Dataset ignorant_data = data;
      ignorant_data.regime = Regime::kJoints;
      for (DatasetRecord& rec : ignorant_data.records) rec.joints = rec.noisy_joints;
      StagedTrainOptions ign_opt;
      ign_opt.seed = seed;
      const StagedTrainResult ignorant = staged_train(ignorant_data, ign_opt);

      Json row;
      row["sigma"] = sigma;
      row["trial"] = i;
      row["aware_train_px"] = avg_px_at_joints(aware.model, data, /*use_noisy=*/true);
      row["aware_test_px"] = evaluate_average_pixel_norm(aware.model, test);
      row["ignorant_train_px"] = avg_px_at_joints(ignorant.model, data, /*use_noisy=*/true);
      row["ignorant_test_px"] = evaluate_average_pixel_norm(ignorant.model, test);
      row["lambda"] = aware.report.lambda;
      rows.push_back(std::move(row));
    }
  }
  report.trials = std::move(rows);
  return report;
}

MetricsReport exp_noisy_action_servo(const ExperimentConfig& cfg, bool cartesian) {
  MetricsReport report;
  const std::vector<double> sigmas =
      cfg.noise >= 0 ? std::vector<double>{cfg.noise} : std::vector<double>{0.01, 0.02};
  std::vector<Json> rows;
  Artifacts art{&cfg, &report};
  std::vector<PlotSeries> curves;
  for (double sigma : sigmas) {
    NoiseConfig noise;
    if (cartesian) {
      noise.cart_action_sigma_t = sigma;
      noise.cart_action_sigma_rpy = sigma;
    } else {
      noise.joint_action_sigma = sigma;
    }
    const uint64_t seed = mix_seed(cfg.seed, 6000 + static_cast<int>(sigma * 1000));
    const GroundTruthWorld world = make_default_world(seed, noise);
    const int train_samples = std::min(cfg.samples, 50);  // 50 samples for learning
    const Dataset data = collect_random_dataset(
        world, train_samples, cartesian ? Regime::kCartActions : Regime::kJointActions, seed + 1);
    StagedTrainOptions opt;
    opt.seed = seed;
    const StagedTrainResult trained = staged_train(data, opt);

    // Goals: states visited when replaying the training actions on a fresh
    // plant (the model is valid inside its explored envelope); the plant
    // starts at home, where the controller's tracking anchor is known.
    std::vector<JointVector> target_states;
    {
      SimulatedPlant replay(world, world.home(), mix_seed(seed, 0xeb1a7));
      target_states.push_back(replay.joints());
      for (int t = 0; t + 1 < data.size(); ++t) {
        try {
          if (cartesian)
            replay.command_cartesian(*data.records[t].cart_action);
          else
            replay.command_joint_delta(*data.records[t].joint_action);
          target_states.push_back(replay.joints());
        } catch (const UnreachableTarget&) {
        }
      }
    }

    const int targets = cfg.trials > 0 ? std::min(cfg.trials, 20) : 10;
    std::vector<std::vector<double>> runs;
    Rng rng(mix_seed(seed, 0x7a46e7));
    for (int n = 0; n < targets; ++n) {
      const JointVector goal = target_states[rng.uniform_int(0, (int)target_states.size() - 1)];
      const Observation target_obs = capture(world, goal);
      SimulatedPlant plant(world, world.home(), mix_seed(seed, 80000 + n));
      ServoConfig scfg;
      scfg.max_iters = 40;
      scfg.pixel_tol = cartesian ? 1.0 : 0.5;
      scfg.cartesian = cartesian;
      scfg.seed = mix_seed(seed, 81000 + n);
      if (!cartesian && !trained.latents.joints.empty()) {
        scfg.initial_joint_estimate = trained.latents.joints.front();
        scfg.joint_prior = trained.latents.joints;
      }
      Json row;
      row["sigma"] = sigma;
      row["target"] = n;
      try {
        const ServoTrace trace = servo_loop(trained.model, plant, target_obs, scfg);
        std::vector<double> errs;
        for (const auto& r : trace.rows) errs.push_back(r.avg_pixel_norm);
        runs.push_back(errs);
        row["final_px"] = trace.final_error();
        double best = std::numeric_limits<double>::infinity();
        for (double e : errs) best = std::min(best, e);
        row["best_px"] = best;
        int to_tol = -1;
        for (size_t q = 0; q < errs.size(); ++q)
          if (errs[q] <= (cartesian ? 5.0 : 1.0)) {
            to_tol = static_cast<int>(q) + 1;
            break;
          }
        row["iters_to_tol"] = to_tol;
      } catch (const std::runtime_error&) {
        row["final_px"] = -1.0;
        row["iters_to_tol"] = -1;
      }
      rows.push_back(std::move(row));
    }
    curves.push_back(mean_curve("sigma=" + std::to_string(sigma).substr(0, 4), runs, 40));
  }
  report.trials = std::move(rows);
  art.plot(cartesian ? "noisy_cart_servo" : "noisy_joint_servo", curves,
           {"Servoing under controller noise", "iteration", "avg pixel norm", true, false},
           "iteration");
  return report;
}

MetricsReport exp_change_point(const ExperimentConfig& cfg) {
  MetricsReport report;
  std::vector<Json> rows;
  std::map<int, std::vector<double>> by_post;
  const int cp_trials = cfg.trials > 0 ? cfg.trials : 10;
  for (int i = 0; i < cp_trials; ++i) {
    const uint64_t seed = mix_seed(cfg.seed, 7000 + i);
    const GroundTruthWorld world = make_default_world(seed);
    const ModelParams model = ground_truth_model(world);
    GroundTruthWorld shifted = world;
    Rng rng(mix_seed(seed, 0xca35));
    shifted.cameras[1].extrinsics.xyz += Eigen::Vector3d(
        rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03));
    shifted.cameras[1].extrinsics.rpy += Eigen::Vector3d(
        rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04));

    std::vector<OnlineSample> pre, post;
    for (int n = 0; n < 50; ++n) {
      const JointVector j = random_visible_config(world, rng);
      pre.push_back({j, capture(world, j)});
    }
    for (int n = 0; n < 10; ++n) {
      const JointVector j = random_visible_config(shifted, rng);
      post.push_back({j, capture(shifted, j)});
    }
    BlockGradients baseline;
    for (int post_n = 0; post_n <= 10; ++post_n) {
      OnlineBuffer buffer(50);
      for (int n = post_n; n < 50; ++n) buffer.push(pre[n].joints, pre[n].observation);
      for (int n = 0; n < post_n; ++n) buffer.push(post[n].joints, post[n].observation);
      const BlockGradients g = buffer_gradient_norms(buffer, model);
      if (post_n == 0) baseline = g;
      Json row;
      row["trial"] = i;
      row["post_shift_samples"] = post_n;
      row["grad_norm"] = g.total;
      if (post_n > 0) {
        const ChangeReport change = detect_change(buffer, model, baseline);
        row["spike_ratio"] = change.ratio;
        row["detected"] = change.kind == ChangeKind::kCamera ? 1 : 0;
        row["attributed_camera"] = change.camera_id;
      }
      by_post[post_n].push_back(g.total);
      rows.push_back(std::move(row));
    }
  }
  report.trials = std::move(rows);
  Artifacts art{&cfg, &report};
  PlotSeries s;
  s.name = "gradient norm";
  for (const auto& [post, norms] : by_post) {
    s.xs.push_back(post);
    s.ys.push_back(median(norms));
  }
  art.plot("change_point", {s},
           {"Gradient norm vs post-shift buffer samples", "post-shift samples", "gradient norm",
            true, false},
           "post_shift_samples");
  return report;
}

MetricsReport exp_scatter(const ExperimentConfig& cfg) {
  MetricsReport report;
  const int trials = cfg.trials > 0 ? cfg.trials : 20;
  report.trials = run_trials(cfg, trials, [&](int i, uint64_t seed) {
    const GroundTruthWorld world = make_default_world(seed);
    const Dataset pool = collect_random_dataset(world, 100, Regime::kJoints, seed + 1);
    const Dataset test = collect_random_dataset(world, 100, Regime::kJoints, seed + 2);
    Dataset train = pool;
    train.records.resize(50);
    StagedTrainOptions opt;
    opt.seed = seed;
    const StagedTrainResult res = staged_train(train, opt);
    Json row;
    row["trial"] = i;
    row["train_px"] = res.report.final_train_avg_px;
    row["test_px"] = evaluate_average_pixel_norm(res.model, test);
    return row;
  });
  Artifacts art{&cfg, &report};
  PlotSeries s;
  s.name = "runs";
  for (const Json& r : report.trials) {
    s.xs.push_back(r["train_px"].get<double>());
    s.ys.push_back(r["test_px"].get<double>());
  }
  art.plot("train_test_scatter", {s},
           {"Train vs test pixel error", "train avg px", "test avg px", false, true}, "train_px");
  return report;
}

MetricsReport exp_timing(const ExperimentConfig& cfg) {
  MetricsReport report;
  const GroundTruthWorld world = make_default_world(cfg.seed);
  const ModelParams model = ground_truth_model(world);
  const Dataset data = collect_random_dataset(world, 1, Regime::kJoints, cfg.seed + 1);
  const TrainingData td = training_data_from_dataset(data);
  const JointVector j = *data.records[0].joints;
  const Pose pose = forward_kinematics(model.kin, j);
  const Observation obs = data.records[0].observation;
  const Eigen::Matrix3Xd world_pts = apply_structure(model.structure, pose);

  auto time_ms = [&](const std::function<void()>& fn, int reps) {
    std::vector<double> samples;
    for (int s = 0; s < 7; ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      for (int r = 0; r < reps; ++r) fn();
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / reps);
    }
    return median(samples);
  };

  Json row;
  row["fk_ms"] = time_ms([&] { (void)forward_kinematics(model.kin, j); }, 2000);
  row["forward_cam_feature_ms"] = time_ms(
      [&] {
        for (const CameraParams& cam : model.cameras) (void)project_all(cam, world_pts);
      },
      2000);
  row["forward_e2e_ms"] = time_ms([&] { (void)generate_observation_all(model, j); }, 2000);
  row["loss_pixel_ms"] = time_ms(
      [&] { (void)evaluate_loss({LossVariant::kE2e, 0.0}, model, {}, td, {0}); }, 2000);
  {
    TrainingData td_pose = td;
    td_pose.poses_obs.assign(1, pose);
    row["loss_pose_ms"] =
        time_ms([&] { (void)evaluate_loss({LossVariant::kKin, 0.0}, model, {}, td_pose, {0}); },
                2000);
    FreeVariables kin_mask = FreeVariables::none(2);
    kin_mask.base = kin_mask.dh = true;
    row["grad_kin_ms"] = time_ms(
        [&] {
          (void)loss_gradient({LossVariant::kKin, 0.0}, model, {}, td_pose, {0}, kin_mask, {});
        },
        500);
  }
  {
    const FreeVariables mask = FreeVariables::all_model(2);
    row["grad_e2e_ms"] = time_ms(
        [&] { (void)loss_gradient({LossVariant::kE2e, 0.0}, model, {}, td, {0}, mask, {}); }, 500);
  }
  {
    Latents latents;
    latents.poses.push_back(from_pose(pose));
    FreeVariables cam_mask = FreeVariables::none(2);
    cam_mask.structure = true;
    cam_mask.cam_extrinsics.assign(2, true);
    cam_mask.cam_intrinsics.assign(2, true);
    cam_mask.latent_poses = true;
    row["grad_cam_ms"] = time_ms(
        [&] {
          (void)loss_gradient({LossVariant::kCam, 0.0}, model, latents, td, {0}, cam_mask, {0});
        },
        500);
  }
  row["infer_pose_ms"] = time_ms([&] { (void)infer_pose_from_image(model, obs); }, 5);
  {
    const auto seeds = default_ik_seeds(6, 16, cfg.seed);
    row["infer_joints_from_pose_ms"] =
        time_ms([&] { (void)infer_joints_from_pose(model, pose, seeds); }, 3);
    row["infer_joints_from_image_ms"] = time_ms(
        [&] {
          const Pose p = infer_pose_from_image(model, obs);
          (void)infer_joints_from_pose(model, p, seeds);
        },
        3);
  }
  report.trials = {row};
  return report;
}

}  // namespace

const std::vector<ExperimentEntry>& experiment_registry() {
  static const std::vector<ExperimentEntry> registry = {
      {"e2e-ablation", "loss reduction from the final end-to-end stage",
       [](const ExperimentConfig& c) { return exp_e2e_ablation(c); }},
      {"stages", "single-stage vs two-stage vs three-stage optimization at equal budget",
       [](const ExperimentConfig& c) { return exp_stages(c); }},
      {"kfold", "k-fold cross validation of staged training",
       [](const ExperimentConfig& c) { return exp_kfold(c); }},
      {"sample-efficiency", "held-out error vs training-set size",
       [](const ExperimentConfig& c) { return exp_sample_efficiency(c); }},
      {"single-camera-inference", "joint/reprojection accuracy with one vs two cameras",
       [](const ExperimentConfig& c) { return exp_single_camera_inference(c); }},
      {"single-camera-training", "triangulation-init vs SfM-init single-camera learning",
       [](const ExperimentConfig& c) { return exp_single_camera_training(c); }},
      {"relearn-camera", "samples needed to relearn added/moved cameras",
       [](const ExperimentConfig& c) {
         MetricsReport a = relearn_experiment(c, "camera-added");
         MetricsReport b = relearn_experiment(c, "camera-moved");
         for (Json& row : a.trials) row["variant"] = "added";
         for (Json& row : b.trials) row["variant"] = "moved";
         a.trials.insert(a.trials.end(), b.trials.begin(), b.trials.end());
         a.artifacts.insert(a.artifacts.end(), b.artifacts.begin(), b.artifacts.end());
         return a;
       }},
      {"relearn-structure", "samples needed to relearn swapped structure",
       [](const ExperimentConfig& c) { return relearn_experiment(c, "structure"); }},
      {"relearn-base", "samples needed to relearn a shifted base frame",
       [](const ExperimentConfig& c) { return relearn_experiment(c, "base"); }},
      {"relearn-kinematics", "samples needed to relearn kinematics from scratch",
       [](const ExperimentConfig& c) { return relearn_experiment(c, "kinematics"); }},
      {"servo-compare", "learned-model servoing vs the IBVS baseline",
       [](const ExperimentConfig& c) { return exp_servo_compare(c, false); }},
      {"servo-compare-noisy", "servo comparison with noisy joints and actions",
       [](const ExperimentConfig& c) { return exp_servo_compare(c, true); }},
      {"noisy-state", "noise-aware vs noise-ignorant learning from noisy joints",
       [](const ExperimentConfig& c) { return exp_noisy_state(c); }},
      {"noisy-cart-servo", "servoing a noisy Cartesian controller (action-only learning)",
       [](const ExperimentConfig& c) { return exp_noisy_action_servo(c, true); }},
      {"noisy-joint-servo", "servoing a noisy joint controller (action-only learning)",
       [](const ExperimentConfig& c) { return exp_noisy_action_servo(c, false); }},
      {"change-point", "gradient-norm spike when a camera is shifted",
       [](const ExperimentConfig& c) { return exp_change_point(c); }},
      {"train-test-scatter", "train vs test pixel error over repeated runs",
       [](const ExperimentConfig& c) { return exp_scatter(c); }},
      {"timing", "self-measured speed of the forward/gradient/inference queries",
       [](const ExperimentConfig& c) { return exp_timing(c); }},
  };
  return registry;
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const ExperimentEntry& entry : experiment_registry()) {
    if (entry.name != cfg.name) continue;
    MetricsReport report = entry.run(cfg);
    report.experiment = cfg.name;
    report.config = config_json(cfg);
    Json agg = aggregate_trials(report.trials);
    if (!report.aggregate.is_null())
      for (auto it = report.aggregate.begin(); it != report.aggregate.end(); ++it)
        agg[it.key()] = it.value();
    report.aggregate = std::move(agg);
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!cfg.out_dir.empty()) {
      fs::create_directories(cfg.out_dir);
      Json out = report.to_json();
      write_json_file((fs::path(cfg.out_dir) / (cfg.name + ".metrics.json")).string(), out);
    }
    return report;
  }
  throw UsageError("unknown experiment: " + cfg.name);
}

}  // namespace viskin
