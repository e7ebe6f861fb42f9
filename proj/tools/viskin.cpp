// viskin: learn a generative robot/camera model from feature observations
// and drive visual servoing with it, against a built-in simulator.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "viskin/experiments.hpp"
#include "viskin/ibvs.hpp"
#include "viskin/inference.hpp"
#include "viskin/pipeline.hpp"
#include "viskin/serialization.hpp"
#include "viskin/svg.hpp"

namespace {

using namespace viskin;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitConvergence = 4;

uint64_t default_seed() {
  if (const char* env = std::getenv("VISKIN_SEED")) return std::strtoull(env, nullptr, 10);
  return 42;
}

NoiseConfig noise_from_flags(double joint_read, double joint_action, double cart_t,
                             double cart_rpy, double pose_read) {
  NoiseConfig n;
  n.joint_read_sigma = joint_read;
  n.joint_action_sigma = joint_action;
  n.cart_action_sigma_t = cart_t;
  n.cart_action_sigma_rpy = cart_rpy;
  n.pose_read_sigma = pose_read;
  return n;
}

Json train_report_to_json(const TrainReport& report) {
  Json out;
  out["schema_version"] = 1;
  out["regime"] = report.regime;
  out["restarts"] = report.restarts;
  out["lambda"] = report.lambda;
  out["final_train_loss"] = report.final_train_loss;
  out["final_train_avg_px"] = report.final_train_avg_px;
  out["converged"] = report.converged;
  Json stages = Json::array();
  for (const StageReport& st : report.stages) {
    Json s;
    s["name"] = st.name;
    s["iterations"] = st.iterations;
    s["initial_loss"] = st.initial_loss;
    s["final_loss"] = st.final_loss;
    s["loss_curve"] = st.curve;
    stages.push_back(std::move(s));
  }
  out["stages"] = std::move(stages);
  out["wall_time_s"] = report.wall_time_s;  // volatile field, excluded from byte comparisons
  return out;
}

int cmd_simulate(uint64_t seed, int64_t data_seed, int samples, const std::string& regime,
                 const NoiseConfig& noise, const std::string& out_path,
                 const std::string& model_out) {
  const GroundTruthWorld world = make_default_world(seed, noise);
  const uint64_t collection_seed =
      data_seed >= 0 ? static_cast<uint64_t>(data_seed) : mix_seed(seed, 0xc0117ec7);
  const Dataset data =
      collect_random_dataset(world, samples, regime_from_name(regime), collection_seed);
  write_json_file(out_path, dataset_to_json(data));
  if (!model_out.empty()) write_json_file(model_out, model_to_json(ground_truth_model(world)));
  std::cout << "simulate: wrote " << data.size() << " records (" << regime << ", world seed "
            << seed << ") to " << out_path << "\n";
  return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& model_out,
              const std::string& report_out, uint64_t seed, int restarts, int iterations,
              double lambda, double threshold) {
  const Dataset data = dataset_from_json(read_json_file(data_path));
  StagedTrainOptions opt;
  opt.seed = seed;
  opt.restarts = restarts;
  opt.stage_iterations = iterations;
  opt.lambda = lambda;
  opt.convergence_threshold_px = threshold;
  const StagedTrainResult res = staged_train(data, opt);
  if (!model_out.empty()) write_json_file(model_out, model_to_json(res.model));
  if (!report_out.empty()) write_json_file(report_out, train_report_to_json(res.report));
  std::cout << "train: regime=" << res.report.regime << " final_loss="
            << res.report.final_train_loss << " avg_px=" << res.report.final_train_avg_px
            << " lambda=" << res.report.lambda << (res.report.converged ? "" : " NOT-CONVERGED")
            << "\n";
  return res.report.converged ? kExitOk : kExitConvergence;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& out_path) {
  const ModelParams model = model_from_json(read_json_file(model_path));
  const Dataset data = dataset_from_json(read_json_file(data_path));
  const double avg_px = evaluate_average_pixel_norm(model, data);
  const double loss = evaluate_e2e_loss(model, data);
  Json out;
  out["schema_version"] = 1;
  out["records"] = data.size();
  out["avg_pixel_norm"] = avg_px;
  out["pixel_loss"] = loss;
  if (!out_path.empty()) write_json_file(out_path, out);
  std::cout << "eval: avg_pixel_norm=" << avg_px << " over " << data.size() << " records\n";
  return kExitOk;
}

int cmd_servo(const std::string& model_path, uint64_t world_seed, uint64_t target_seed,
              const std::string& controller, double gamma, int max_iters, double tol,
              const NoiseConfig& noise, const std::string& trace_out) {
  const GroundTruthWorld world = make_default_world(world_seed, noise);
  Rng rng(mix_seed(target_seed, 0x5e6f1));
  auto sample_config = [&]() {
    for (int tries = 0; tries < 500; ++tries) {
      JointVector j(world.kin.dof());
      for (int i = 0; i < j.size(); ++i) j[i] = rng.uniform(-M_PI / 2, M_PI / 2);
      const Observation obs = capture(world, j);
      if (obs.camera_count() < 2 || obs.total_features() < 12) continue;
      int shared = 0;
      for (const PixelFeature& f : obs.cams[0])
        for (const PixelFeature& g : obs.cams[1])
          if (g.id == f.id) {
            ++shared;
            break;
          }
      if (shared >= 8) return j;
    }
    throw ConvergenceFailure("could not sample a visible target configuration");
  };
  const JointVector start = sample_config();
  const JointVector goal = sample_config();
  const Observation target_obs = capture(world, goal);
  SimulatedPlant plant(world, start, mix_seed(target_seed, 0x9fa27));

  ServoTrace trace;
  if (controller == "learned" || controller == "learned-cartesian") {
    const ModelParams model = model_from_json(read_json_file(model_path));
    ServoConfig cfg;
    cfg.max_iters = max_iters;
    cfg.pixel_tol = tol;
    cfg.cartesian = controller == "learned-cartesian";
    cfg.seed = target_seed;
    cfg.initial_joint_estimate = start;  // tracked state at servo start
    trace = servo_loop(model, plant, target_obs, cfg);
  } else if (controller == "ibvs") {
    // Baseline: ground-truth Jacobian, hand-eye, and stereo depths.
    const std::vector<double> tols;
    IbvsConfig icfg;
    icfg.gamma = gamma;
    for (int iter = 1; iter <= max_iters; ++iter) {
      const Observation obs = plant.observe();
      std::vector<IbvsFeature> cur, tgt;
      auto features = [&](const Observation& o) {
        std::vector<IbvsFeature> out;
        const Pose e0 = world.cameras[0].extrinsic_pose();
        for (const PixelFeature& f : o.cams[0]) {
          const auto it = std::find_if(o.cams[1].begin(), o.cams[1].end(),
                                       [&](const PixelFeature& g) { return g.id == f.id; });
          if (it == o.cams[1].end()) continue;
          const Eigen::Vector3d x =
              triangulate({{world.cameras[0], f.u, f.v}, {world.cameras[1], it->u, it->v}});
          out.push_back({f.id, f.u, f.v, e0.apply(x).z()});
        }
        return out;
      };
      cur = features(obs);
      tgt = features(target_obs);
      if (cur.empty() || tgt.empty()) break;  // stereo view lost; run ends unconverged
      const auto jac = robot_jacobian(world.kin, plant.joints());
      const Pose hand_eye = compose(world.cameras[0].extrinsic_pose(),
                                    forward_kinematics(world.kin, plant.joints()));
      IbvsCommand cmd;
      try {
        cmd = ibvs_step(cur, tgt, world.cameras[0].intrinsics, jac, hand_eye, icfg);
      } catch (const DimensionMismatch&) {
        break;
      }
      const Observation next = plant.command_joint_delta(cmd.qdot);
      ServoTraceRow row;
      row.iter = iter;
      row.avg_pixel_norm = servo_pixel_error(next, target_obs);
      row.cam_residuals = per_camera_pixel_error(next, target_obs);
      row.commanded = cmd.qdot;
      trace.rows.push_back(std::move(row));
      if (row.avg_pixel_norm <= tol) {
        trace.status = ServoStatus::kConverged;
        break;
      }
    }
  } else {
    throw UsageError("unknown controller: " + controller);
  }
  if (!trace_out.empty())
    write_text_file(trace_out, trace.to_csv(static_cast<int>(world.cameras.size())));
  std::cout << "servo: controller=" << controller << " iterations=" << trace.iterations()
            << " final_px=" << trace.final_error() << " status="
            << (trace.status == ServoStatus::kConverged
                    ? "converged"
                    : trace.status == ServoStatus::kStalled ? "stalled" : "max-iterations")
            << "\n";
  return trace.status == ServoStatus::kConverged ? kExitOk : kExitConvergence;
}

int cmd_experiment(const std::string& name, uint64_t seed, int trials, int samples, int k,
                   double noise, int jobs, const std::string& out_dir, bool list) {
  if (list) {
    for (const ExperimentEntry& e : experiment_registry())
      std::cout << e.name << "  -  " << e.description << "\n";
    return kExitOk;
  }
  ExperimentConfig cfg;
  cfg.name = name;
  cfg.seed = seed;
  cfg.trials = trials;
  if (samples > 0) cfg.samples = samples;
  cfg.k = k;
  cfg.noise = noise;
  cfg.jobs = jobs;
  cfg.out_dir = out_dir;
  const MetricsReport report = run_experiment(cfg);
  std::cout << "experiment " << name << ": " << report.trials.size() << " trial rows, "
            << report.artifacts.size() << " artifacts";
  if (!out_dir.empty()) std::cout << " in " << out_dir;
  std::cout << "\n" << report.aggregate.dump(2) << "\n";
  return kExitOk;
}

int cmd_plot(const std::string& csv_path, const std::string& out_path, const std::string& title,
             bool log_y, bool scatter) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open: " + csv_path);
  std::string header;
  if (!std::getline(in, header)) throw IoError("empty CSV: " + csv_path);
  std::vector<std::string> columns;
  {
    std::stringstream ss(header);
    std::string col;
    while (std::getline(ss, col, ',')) columns.push_back(col);
  }
  if (columns.size() < 2) throw IoError("CSV needs an x column and at least one series");
  std::vector<PlotSeries> series(columns.size() - 1);
  for (size_t i = 1; i < columns.size(); ++i) series[i - 1].name = columns[i];
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(ss, cell, ','))
      values.push_back(cell.empty() || cell == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                                     : std::stod(cell));
    for (size_t i = 1; i < values.size() && i < columns.size(); ++i) {
      if (!std::isfinite(values[i])) continue;
      series[i - 1].xs.push_back(values[0]);
      series[i - 1].ys.push_back(values[i]);
    }
  }
  PlotSpec spec;
  spec.title = title.empty() ? csv_path : title;
  spec.x_label = columns[0];
  spec.y_label = "value";
  spec.log_y = log_y;
  spec.scatter = scatter;
  write_text_file(out_path, render_svg_plot(series, spec));
  std::cout << "plot: wrote " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"viskin: generative visual-kinematic model learning and servoing"};
  app.require_subcommand(1);
  const uint64_t seed_default = default_seed();

  // simulate
  auto* sim = app.add_subcommand("simulate", "generate a dataset from the built-in simulator");
  uint64_t sim_seed = seed_default;
  int64_t sim_data_seed = -1;
  int sim_samples = 100;
  std::string sim_regime = "joints", sim_out = "dataset.json", sim_model_out;
  double s_jr = 0, s_ja = 0, s_ct = 0, s_cr = 0, s_pr = 0;
  sim->add_option("--seed", sim_seed, "world + collection seed");
  sim->add_option("--data-seed", sim_data_seed,
                  "collection seed override (same world, fresh samples; e.g. held-out sets)");
  sim->add_option("--samples", sim_samples, "number of records")->check(CLI::PositiveNumber);
  sim->add_option("--regime", sim_regime,
                  "joints|noisy_joints|joint_actions|cart_actions|noisy_pose");
  sim->add_option("--out", sim_out, "dataset JSON path");
  sim->add_option("--model-out", sim_model_out, "also write the ground-truth model JSON");
  sim->add_option("--joint-read-sigma", s_jr);
  sim->add_option("--joint-action-sigma", s_ja);
  sim->add_option("--cart-action-sigma-t", s_ct);
  sim->add_option("--cart-action-sigma-rpy", s_cr);
  sim->add_option("--pose-read-sigma", s_pr);

  // train
  auto* train = app.add_subcommand("train", "staged training on a dataset");
  std::string train_data, train_model_out = "model.json", train_report_out;
  uint64_t train_seed = seed_default;
  int train_restarts = 0, train_iters = 200;
  double train_lambda = -1.0, train_threshold = 10.0;
  train->add_option("--data", train_data, "dataset JSON")->required();
  train->add_option("--out", train_model_out, "model JSON output");
  train->add_option("--report", train_report_out, "training report JSON output");
  train->add_option("--seed", train_seed);
  train->add_option("--restarts", train_restarts, "0 = auto (5 stereo / 20 single-camera)");
  train->add_option("--iterations", train_iters, "iterations per stage");
  train->add_option("--lambda", train_lambda, "penalty weight; <0 selects on a validation split");
  train->add_option("--threshold", train_threshold, "convergence threshold (avg px)");

  // eval
  auto* eval = app.add_subcommand("eval", "average pixel norm of a model on a dataset");
  std::string eval_model, eval_data, eval_out;
  eval->add_option("--model", eval_model)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--out", eval_out, "metrics JSON output");

  // servo
  auto* servo = app.add_subcommand("servo", "one servoing run against the simulated plant");
  std::string servo_model, servo_controller = "learned", servo_trace;
  uint64_t servo_world_seed = seed_default, servo_target_seed = 0;
  double servo_gamma = 0.5, servo_tol = 1.0;
  int servo_max = 30;
  double v_jr = 0, v_ja = 0, v_ct = 0, v_cr = 0;
  servo->add_option("--model", servo_model, "model JSON (learned controllers)");
  servo->add_option("--controller", servo_controller, "learned|learned-cartesian|ibvs");
  servo->add_option("--world-seed", servo_world_seed);
  servo->add_option("--target-seed", servo_target_seed);
  servo->add_option("--gamma", servo_gamma, "IBVS gain");
  servo->add_option("--max-iters", servo_max);
  servo->add_option("--tol", servo_tol, "pixel tolerance");
  servo->add_option("--trace", servo_trace, "ServoTrace CSV output");
  servo->add_option("--joint-read-sigma", v_jr);
  servo->add_option("--joint-action-sigma", v_ja);
  servo->add_option("--cart-action-sigma-t", v_ct);
  servo->add_option("--cart-action-sigma-rpy", v_cr);

  // experiment
  auto* exp = app.add_subcommand("experiment", "run a registered experiment");
  std::string exp_name, exp_out;
  uint64_t exp_seed = seed_default;
  int exp_trials = 0, exp_samples = 0, exp_k = 0, exp_jobs = 1;
  double exp_noise = -1.0;
  bool exp_list = false;
  exp->add_option("--name", exp_name);
  exp->add_flag("--list", exp_list, "list registered experiments");
  exp->add_option("--seed", exp_seed);
  exp->add_option("--trials", exp_trials);
  exp->add_option("--samples", exp_samples);
  exp->add_option("--k", exp_k, "k-fold parameter");
  exp->add_option("--noise", exp_noise, "noise sigma override");
  exp->add_option("--jobs", exp_jobs, "parallel trial workers");
  exp->add_option("--out", exp_out, "output directory");

  // plot
  auto* plot = app.add_subcommand("plot", "render a CSV as a self-contained SVG");
  std::string plot_csv, plot_out = "plot.svg", plot_title;
  bool plot_logy = false, plot_scatter = false;
  plot->add_option("--csv", plot_csv)->required();
  plot->add_option("--out", plot_out);
  plot->add_option("--title", plot_title);
  plot->add_flag("--log-y", plot_logy);
  plot->add_flag("--scatter", plot_scatter);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sim->parsed())
      return cmd_simulate(sim_seed, sim_data_seed, sim_samples, sim_regime,
                          noise_from_flags(s_jr, s_ja, s_ct, s_cr, s_pr), sim_out, sim_model_out);
    if (train->parsed())
      return cmd_train(train_data, train_model_out, train_report_out, train_seed, train_restarts,
                       train_iters, train_lambda, train_threshold);
    if (eval->parsed()) return cmd_eval(eval_model, eval_data, eval_out);
    if (servo->parsed())
      return cmd_servo(servo_model, servo_world_seed, servo_target_seed, servo_controller,
                       servo_gamma, servo_max, servo_tol,
                       noise_from_flags(v_jr, v_ja, v_ct, v_cr, 0), servo_trace);
    if (exp->parsed())
      return cmd_experiment(exp_name, exp_seed, exp_trials, exp_samples, exp_k, exp_noise,
                            exp_jobs, exp_out, exp_list);
    if (plot->parsed()) return cmd_plot(plot_csv, plot_out, plot_title, plot_logy, plot_scatter);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ConvergenceFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
