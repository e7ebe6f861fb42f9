#include "viskin/bootstrap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace viskin {

namespace {

Eigen::Vector2d normalized_coords(double u, double v, const Intrinsics& k) {
  return {(u - k.px) / k.fx, (v - k.py) / k.fy};
}

// Hartley conditioning: translate the centroid to the origin and scale the
// mean distance to sqrt(2). Returns the applied transform.
Mat3d hartley_normalize(std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - c).norm();
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  for (auto& p : pts) p = s * (p - c);
  Mat3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

CameraParams unit_camera(const Pose& extrinsic) {
  CameraParams cam;
  cam.intrinsics = {1.0, 1.0, 0.0, 0.0};
  cam.extrinsics = from_pose(extrinsic);
  return cam;
}

int cheirality_count(const Mat3d& r, const Eigen::Vector3d& t,
                     const std::vector<Eigen::Vector2d>& x1,
                     const std::vector<Eigen::Vector2d>& x2) {
  const CameraParams cam1 = unit_camera(Pose());
  const CameraParams cam2 = unit_camera(Pose::from_rt(r, t));
  int count = 0;
  for (size_t i = 0; i < x1.size(); ++i) {
    try {
      const Eigen::Vector3d p =
          triangulate({{cam1, x1[i].x(), x1[i].y()}, {cam2, x2[i].x(), x2[i].y()}});
      const double z2 = (r * p + t).z();
      if (p.z() > 0.0 && z2 > 0.0) ++count;
    } catch (const DegenerateGeometry&) {
    }
  }
  return count;
}

}  // namespace

Pose estimate_relative_pose(const std::vector<Correspondence>& corr, const Intrinsics& k1,
                            const Intrinsics& k2) {
  if (corr.size() < 8)
    throw InsufficientCorrespondences("eight-point needs at least 8 correspondences, have " +
                                      std::to_string(corr.size()));
  std::vector<Eigen::Vector2d> x1, x2;
  x1.reserve(corr.size());
  x2.reserve(corr.size());
  for (const Correspondence& c : corr) {
    x1.push_back(normalized_coords(c.u1, c.v1, k1));
    x2.push_back(normalized_coords(c.u2, c.v2, k2));
  }
  std::vector<Eigen::Vector2d> c1 = x1, c2 = x2;
  const Mat3d t1 = hartley_normalize(c1);
  const Mat3d t2 = hartley_normalize(c2);

  Eigen::MatrixXd a(static_cast<int>(corr.size()), 9);
  for (size_t i = 0; i < corr.size(); ++i) {
    const double p1 = c1[i].x(), q1 = c1[i].y();
    const double p2 = c2[i].x(), q2 = c2[i].y();
    a.row(static_cast<int>(i)) << p2 * p1, p2 * q1, p2, q2 * p1, q2 * q1, q2, p1, q1, 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd sv = svd.singularValues();
  if (sv(7) <= 1e-8 * std::max(sv(0), 1e-300))
    throw DegenerateGeometry("essential system has a degenerate nullspace (zero baseline?)");
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Mat3d e_hat;
  e_hat << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  Mat3d essential = t2.transpose() * e_hat * t1;

  Eigen::JacobiSVD<Mat3d> esvd(essential, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3d u = esvd.matrixU(), v = esvd.matrixV();
  if (u.determinant() < 0.0) u = -u;
  if (v.determinant() < 0.0) v = -v;
  Mat3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3d r_a = u * w * v.transpose();
  const Mat3d r_b = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t_u = u.col(2);

  const std::array<std::pair<Mat3d, Eigen::Vector3d>, 4> candidates = {
      std::make_pair(r_a, t_u), std::make_pair(r_a, Eigen::Vector3d(-t_u)),
      std::make_pair(r_b, t_u), std::make_pair(r_b, Eigen::Vector3d(-t_u))};
  int best_count = -1, best_index = 0;
  for (int i = 0; i < 4; ++i) {
    const int count = cheirality_count(candidates[i].first, candidates[i].second, x1, x2);
    if (count > best_count) {
      best_count = count;
      best_index = i;
    }
  }
  if (best_count <= 0)
    throw DegenerateGeometry("no essential decomposition places points in front of both cameras");
  const auto& [r, t] = candidates[best_index];
  return Pose::from_rt(r, t.normalized());
}

std::vector<std::optional<Pose>> chain_pose_trajectory(
    const std::vector<std::map<int, Eigen::Vector3d>>& clouds) {
  const int t_count = static_cast<int>(clouds.size());
  std::vector<std::optional<Pose>> poses(t_count);
  int anchor = -1;
  size_t best_size = 2;  // need at least 3 points
  for (int t = 0; t < t_count; ++t)
    if (clouds[t].size() > best_size) {
      best_size = clouds[t].size();
      anchor = t;
    }
  if (anchor < 0) return poses;
  poses[anchor] = Pose();

  std::set<std::pair<int, int>> unusable;
  while (true) {
    int best_new = -1, best_cov = -1, best_shared = 2;
    for (int tn = 0; tn < t_count; ++tn) {
      if (poses[tn]) continue;
      for (int tc = 0; tc < t_count; ++tc) {
        if (!poses[tc] || unusable.count({tn, tc})) continue;
        int shared = 0;
        for (const auto& [id, p] : clouds[tn])
          if (clouds[tc].count(id)) ++shared;
        if (shared > best_shared) {
          best_shared = shared;
          best_new = tn;
          best_cov = tc;
        }
      }
    }
    if (best_new < 0) break;
    std::vector<Eigen::Vector3d> src, dst;
    for (const auto& [id, p] : clouds[best_new]) {
      const auto it = clouds[best_cov].find(id);
      if (it != clouds[best_cov].end()) {
        src.push_back(it->second);
        dst.push_back(p);
      }
    }
    try {
      const Pose rel = rigid_fit(src, dst);
      poses[best_new] = compose(rel, *poses[best_cov]);
    } catch (const DegenerateGeometry&) {
      unusable.insert({best_new, best_cov});
    }
  }
  return poses;
}

namespace {

// Observed pixels per timestep per camera, keyed by feature id.
using FeatureMap = std::map<int, Eigen::Vector2d>;

std::vector<std::vector<FeatureMap>> index_observations(const Dataset& data) {
  const int c = data.camera_count();
  std::vector<std::vector<FeatureMap>> by_time(data.size(), std::vector<FeatureMap>(c));
  for (int t = 0; t < data.size(); ++t) {
    const Observation& obs = data.records[t].observation;
    for (int i = 0; i < obs.camera_count(); ++i)
      for (const PixelFeature& f : obs.cams[i])
        by_time[t][i][f.id] = Eigen::Vector2d(f.u, f.v);
  }
  return by_time;
}

std::vector<Correspondence> pair_correspondences(const std::vector<std::vector<FeatureMap>>& idx,
                                                 int cam_a, int cam_b) {
  std::vector<Correspondence> corr;
  for (const auto& views : idx) {
    for (const auto& [id, uv_a] : views[cam_a]) {
      const auto it = views[cam_b].find(id);
      if (it != views[cam_b].end())
        corr.push_back({uv_a.x(), uv_a.y(), it->second.x(), it->second.y()});
    }
  }
  return corr;
}

}  // namespace

std::pair<Pose, double> fit_pose_to_points(const std::vector<CameraParams>& cameras,
                                           const std::vector<CameraObservation>& observed,
                                           const Eigen::Matrix3Xd& points, const Pose6& init,
                                           int iterations) {
  ModelParams model;
  model.structure.coords = points;
  model.cameras = cameras;
  TrainingData td;
  td.camera_count = static_cast<int>(cameras.size());
  Observation obs;
  obs.cams = observed;
  td.observations.push_back(obs);
  Latents latents;
  latents.poses.push_back(init);
  FreeVariables mask = FreeVariables::none(static_cast<int>(cameras.size()));
  mask.latent_poses = true;
  OptimizerConfig cfg;
  cfg.max_iterations = iterations;
  const MinimizeResult res =
      minimize({LossVariant::kCam, 0.0}, mask, model, latents, td, {0}, cfg, 0);
  return {to_pose(res.latents.poses[0]), res.final_loss};
}

InitEstimate init_by_triangulation(const Dataset& data, const std::vector<Intrinsics>& guess) {
  const int c = data.camera_count();
  const int t_count = data.size();
  if (static_cast<int>(guess.size()) != c)
    throw DimensionMismatch("need one intrinsics guess per camera");
  if (c < 2) throw InsufficientCorrespondences("triangulation init needs at least two cameras");
  const auto idx = index_observations(data);

  InitEstimate init;
  init.poses.resize(t_count);
  init.cameras.resize(c);

  // Pairwise shared-correspondence counts.
  std::vector<std::vector<std::vector<Correspondence>>> corr(
      c, std::vector<std::vector<Correspondence>>(c));
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) corr[i][j] = pair_correspondences(idx, i, j);

  // Anchor the camera participating in the strongest pair.
  int anchor = -1;
  size_t best_count = 7;
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j)
      if (corr[i][j].size() > best_count) {
        best_count = corr[i][j].size();
        anchor = i;
      }
  if (anchor < 0)
    throw InsufficientCorrespondences("no camera pair shares 8 correspondences");
  std::vector<std::optional<Pose>> extrinsic(c);
  extrinsic[anchor] = Pose();

  auto triangulate_clouds = [&](const std::vector<std::optional<Pose>>& ext) {
    std::vector<std::map<int, Eigen::Vector3d>> clouds(t_count);
    for (int t = 0; t < t_count; ++t) {
      std::map<int, std::vector<Ray>> rays;
      for (int i = 0; i < c; ++i) {
        if (!ext[i]) continue;
        CameraParams cam;
        cam.intrinsics = guess[i];
        cam.extrinsics = from_pose(*ext[i]);
        for (const auto& [id, uv] : idx[t][i]) rays[id].push_back({cam, uv.x(), uv.y()});
      }
      for (const auto& [id, r] : rays) {
        if (r.size() < 2) continue;
        try {
          clouds[t][id] = triangulate(r);
        } catch (const DegenerateGeometry&) {
        }
      }
    }
    return clouds;
  };

  // Greedily attach remaining cameras through essential estimates; cameras
  // beyond the first pair get their baseline scale fixed against the world
  // points already triangulated.
  int placed = 1;
  while (placed < c) {
    int best_i = -1, best_j = -1;
    size_t best_n = 7;
    for (int i = 0; i < c; ++i) {
      if (!extrinsic[i]) continue;
      for (int j = 0; j < c; ++j) {
        if (extrinsic[j] || i == j) continue;
        const auto& cij = i < j ? corr[i][j] : corr[j][i];
        if (cij.size() > best_n) {
          best_n = cij.size();
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_i < 0) break;  // remaining cameras stay absent
    std::vector<Correspondence> pair_corr;
    if (best_i < best_j) {
      pair_corr = corr[best_i][best_j];
    } else {
      for (const Correspondence& x : corr[best_j][best_i])
        pair_corr.push_back({x.u2, x.v2, x.u1, x.v1});
    }
    Pose rel = estimate_relative_pose(pair_corr, guess[best_i], guess[best_j]);

    if (placed >= 2) {
      // Scale the new baseline so already-known world points reproject.
      const auto clouds = triangulate_clouds(extrinsic);
      std::vector<double> scales;
      const Mat3d r_rel = rel.rotation();
      const Eigen::Vector3d t_rel = rel.translation();
      for (int t = 0; t < t_count; ++t) {
        for (const auto& [id, x_world] : clouds[t]) {
          const auto it = idx[t][best_j].find(id);
          if (it == idx[t][best_j].end()) continue;
          const Eigen::Vector3d a = r_rel * extrinsic[best_i]->apply(x_world);
          const Eigen::Vector2d xn = normalized_coords(it->second.x(), it->second.y(), guess[best_j]);
          for (int axis = 0; axis < 2; ++axis) {
            const double denom = xn[axis] * t_rel.z() - t_rel[axis];
            if (std::abs(denom) > 1e-9) scales.push_back((a[axis] - xn[axis] * a.z()) / denom);
          }
        }
      }
      if (!scales.empty()) {
        std::nth_element(scales.begin(), scales.begin() + scales.size() / 2, scales.end());
        const double s = scales[scales.size() / 2];
        rel = Pose::from_rt(r_rel, Eigen::Vector3d(s * t_rel));
      }
    }
    extrinsic[best_j] = compose(rel, *extrinsic[best_i]);
    ++placed;
  }

  const auto clouds = triangulate_clouds(extrinsic);
  init.poses = chain_pose_trajectory(clouds);
  for (int i = 0; i < c; ++i) {
    if (!extrinsic[i]) continue;
    CameraParams cam;
    cam.intrinsics = guess[i];
    cam.extrinsics = from_pose(*extrinsic[i]);
    init.cameras[i] = cam;
  }
  for (int t = 0; t < t_count; ++t)
    if (init.poses[t]) init.covered_timesteps.push_back(t);
  double spread = 0.0;
  int spread_n = 0;
  for (const auto& cloud : clouds) {
    if (cloud.size() < 2) continue;
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& [id, p] : cloud) centroid += p;
    centroid /= static_cast<double>(cloud.size());
    for (const auto& [id, p] : cloud) {
      spread += (p - centroid).squaredNorm();
      ++spread_n;
    }
  }
  if (spread_n > 0) init.feature_spread = std::sqrt(spread / spread_n);

  // Structure estimate: triangulated world points mapped back through the
  // chained trajectory into its end-effector frame, averaged across
  // timesteps. Features never triangulated stay NaN.
  int feature_count = 0;
  for (const auto& cloud : clouds)
    for (const auto& [id, p] : cloud) feature_count = std::max(feature_count, id + 1);
  if (feature_count > 0) {
    Structure st;
    st.coords.setConstant(3, feature_count, std::numeric_limits<double>::quiet_NaN());
    std::vector<Eigen::Vector3d> sums(feature_count, Eigen::Vector3d::Zero());
    std::vector<int> counts(feature_count, 0);
    for (int t = 0; t < t_count; ++t) {
      if (!init.poses[t]) continue;
      const Pose inv_pose = inverse(*init.poses[t]);
      for (const auto& [id, p] : clouds[t]) {
        sums[id] += inv_pose.apply(p);
        ++counts[id];
      }
    }
    for (int id = 0; id < feature_count; ++id)
      if (counts[id] > 0) st.coords.col(id) = sums[id] / counts[id];
    init.structure = st;
  }
  return init;
}

InitEstimate init_by_sfm(const Dataset& data, const Intrinsics& guess, int restart) {
  const int t_count = data.size();
  const auto idx = index_observations(data);
  int feature_count = 0;
  for (const DatasetRecord& rec : data.records)
    for (const auto& cam_obs : rec.observation.cams)
      for (const PixelFeature& f : cam_obs) feature_count = std::max(feature_count, f.id + 1);

  struct SeedPair {
    int a, b;
    double score;
  };
  std::vector<SeedPair> candidates;
  for (int a = 0; a < t_count; ++a) {
    for (int b = a + 1; b < t_count; ++b) {
      std::vector<double> disp;
      for (const auto& [id, uv] : idx[a][0]) {
        const auto it = idx[b][0].find(id);
        if (it != idx[b][0].end()) disp.push_back((uv - it->second).norm());
      }
      if (disp.size() < 8) continue;
      std::nth_element(disp.begin(), disp.begin() + disp.size() / 2, disp.end());
      candidates.push_back({a, b, static_cast<double>(disp.size()) * disp[disp.size() / 2]});
    }
  }
  if (candidates.empty())
    throw SeedPairNotFound("no view pair shares 8 features");
  std::sort(candidates.begin(), candidates.end(), [](const SeedPair& x, const SeedPair& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });

  const CameraParams synth = [&] {
    CameraParams cam;
    cam.intrinsics = guess;
    return cam;
  }();

  // Try seed pairs starting from the restart's rank until one yields a valid
  // two-view geometry.
  for (size_t attempt = 0; attempt < candidates.size(); ++attempt) {
    const SeedPair seed = candidates[(restart + attempt) % candidates.size()];
    std::vector<Correspondence> corr;
    std::vector<int> corr_ids;
    for (const auto& [id, uv] : idx[seed.a][0]) {
      const auto it = idx[seed.b][0].find(id);
      if (it != idx[seed.b][0].end()) {
        corr.push_back({uv.x(), uv.y(), it->second.x(), it->second.y()});
        corr_ids.push_back(id);
      }
    }
    Pose rel;
    try {
      rel = estimate_relative_pose(corr, guess, guess);
    } catch (const DegenerateGeometry&) {
      continue;
    }

    std::vector<std::optional<Pose>> object_pose(t_count);  // frame at seed.a -> view t
    object_pose[seed.a] = Pose();
    object_pose[seed.b] = rel;

    std::map<int, Eigen::Vector3d> points;
    auto try_triangulate = [&](int id) {
      std::vector<Ray> rays;
      for (int t = 0; t < t_count; ++t) {
        if (!object_pose[t]) continue;
        const auto it = idx[t][0].find(id);
        if (it == idx[t][0].end()) continue;
        CameraParams cam = synth;
        cam.extrinsics = from_pose(*object_pose[t]);
        rays.push_back({cam, it->second.x(), it->second.y()});
      }
      if (rays.size() < 2) return;
      try {
        const Eigen::Vector3d p = triangulate(rays);
        // Keep only points in front of every view that sees them.
        for (int t = 0; t < t_count; ++t) {
          if (!object_pose[t]) continue;
          if (idx[t][0].count(id) && object_pose[t]->apply(p).z() <= kVisibilityZMin) return;
        }
        points[id] = p;
      } catch (const DegenerateGeometry&) {
      }
    };
    for (int id : corr_ids) try_triangulate(id);
    if (points.size() < 6) continue;  // weak seed geometry, try the next pair

    std::vector<char> hopeless(t_count, 0);
    while (true) {
      int best_t = -1, best_seen = 3;
      for (int t = 0; t < t_count; ++t) {
        if (object_pose[t] || hopeless[t]) continue;
        int seen = 0;
        for (const auto& [id, uv] : idx[t][0])
          if (points.count(id)) ++seen;
        if (seen > best_seen) {
          best_seen = seen;
          best_t = t;
        }
      }
      if (best_t < 0) break;

      // 2D-3D registration of the new view against the current structure.
      Eigen::Matrix3Xd pts(3, best_seen);
      CameraObservation view;
      int col = 0;
      for (const auto& [id, uv] : idx[best_t][0]) {
        const auto it = points.find(id);
        if (it == points.end()) continue;
        pts.col(col) = it->second;
        view.push_back({col, uv.x(), uv.y()});
        ++col;
      }
      double best_res = std::numeric_limits<double>::infinity();
      Pose best_pose;
      std::vector<Pose6> seeds;
      for (int t = 0; t < t_count; ++t)
        if (object_pose[t]) seeds.push_back(from_pose(*object_pose[t]));
      // Nearest registered views first; a couple of seeds suffices.
      if (seeds.size() > 4) seeds.resize(4);
      for (const Pose6& s : seeds) {
        const auto [pose, res] = fit_pose_to_points({synth}, {view}, pts, s, 80);
        if (res < best_res) {
          best_res = res;
          best_pose = pose;
        }
      }
      const double rms = std::sqrt(best_res / std::max(1, 2 * best_seen));
      if (rms < 2.0) {
        object_pose[best_t] = best_pose;
        for (const auto& [id, uv] : idx[best_t][0])
          if (!points.count(id)) try_triangulate(id);
      } else {
        hopeless[best_t] = 1;
      }
    }

    InitEstimate init;
    init.poses.resize(t_count);
    init.cameras.resize(1);
    CameraParams cam = synth;  // world frame = seed view's camera frame
    init.cameras[0] = cam;
    for (int t = 0; t < t_count; ++t) {
      if (!object_pose[t]) continue;
      init.poses[t] = *object_pose[t];
      init.covered_timesteps.push_back(t);
    }
    Structure st;
    st.coords.setConstant(3, feature_count, std::numeric_limits<double>::quiet_NaN());
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& [id, p] : points) centroid += p;
    centroid /= static_cast<double>(points.size());
    double spread = 0.0;
    for (const auto& [id, p] : points) {
      st.coords.col(id) = p;
      spread += (p - centroid).squaredNorm();
    }
    init.feature_spread = std::sqrt(spread / static_cast<double>(points.size()));
    init.structure = st;
    return init;
  }
  throw SeedPairNotFound("no seed pair produced a usable two-view geometry");
}

}  // namespace viskin
