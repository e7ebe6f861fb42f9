#include "viskin/ibvs.hpp"

#include <algorithm>

namespace viskin {

Eigen::MatrixXd interaction_matrix(const std::vector<IbvsFeature>& features,
                                   const Intrinsics& intrinsics) {
  Eigen::MatrixXd l(2 * features.size(), 6);
  for (size_t i = 0; i < features.size(); ++i) {
    const IbvsFeature& f = features[i];
    if (!(f.z > 0.0)) throw NonPositiveDepth("feature depth must be positive");
    const double x = (f.u - intrinsics.px) / intrinsics.fx;
    const double y = (f.v - intrinsics.py) / intrinsics.fy;
    const double z = f.z;
    l.row(2 * i) << -1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y;
    l.row(2 * i + 1) << 0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x;
    l.row(2 * i) *= intrinsics.fx;
    l.row(2 * i + 1) *= intrinsics.fy;
  }
  return l;
}

Eigen::Matrix<double, 6, 6> twist_transform(const Pose& hand_eye) {
  const Mat3d r = hand_eye.rotation();
  const Eigen::Vector3d t = hand_eye.translation();
  Mat3d skew;
  skew << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  Eigen::Matrix<double, 6, 6> v = Eigen::Matrix<double, 6, 6>::Zero();
  v.block<3, 3>(0, 0) = r;
  v.block<3, 3>(0, 3) = skew * r;
  v.block<3, 3>(3, 3) = r;
  return v;
}

IbvsCommand ibvs_step(const std::vector<IbvsFeature>& current,
                      const std::vector<IbvsFeature>& target, const Intrinsics& intrinsics,
                      const Eigen::Matrix<double, 6, Eigen::Dynamic>& jacobian,
                      const Pose& hand_eye, const IbvsConfig& cfg) {
  // Match features by id.
  std::vector<std::pair<IbvsFeature, IbvsFeature>> matched;
  for (const IbvsFeature& c : current) {
    const auto it = std::find_if(target.begin(), target.end(),
                                 [&](const IbvsFeature& t) { return t.id == c.id; });
    if (it != target.end()) matched.push_back({c, *it});
  }
  if (matched.empty()) throw DimensionMismatch("no common features between current and target");

  std::vector<IbvsFeature> cur;
  cur.reserve(matched.size());
  for (const auto& [c, t] : matched) cur.push_back(c);
  const Eigen::MatrixXd l_px = interaction_matrix(cur, intrinsics);

  const int k = static_cast<int>(matched.size());
  const int rows = cfg.include_depth ? 3 * k : 2 * k;
  Eigen::MatrixXd l(rows, 6);
  Eigen::VectorXd e(rows);
  for (int i = 0; i < k; ++i) {
    const auto& [c, t] = matched[i];
    if (cfg.include_depth) {
      l.row(3 * i) = l_px.row(2 * i);
      l.row(3 * i + 1) = l_px.row(2 * i + 1);
      const double x = (c.u - intrinsics.px) / intrinsics.fx;
      const double y = (c.v - intrinsics.py) / intrinsics.fy;
      // Depth rate under a camera-frame twist: zdot = -vz - wx*Y + wy*X.
      l.row(3 * i + 2) << 0.0, 0.0, -1.0, -y * c.z, x * c.z, 0.0;
      e[3 * i] = c.u - t.u;
      e[3 * i + 1] = c.v - t.v;
      e[3 * i + 2] = c.z - t.z;
    } else {
      l.row(2 * i) = l_px.row(2 * i);
      l.row(2 * i + 1) = l_px.row(2 * i + 1);
      e[2 * i] = c.u - t.u;
      e[2 * i + 1] = c.v - t.v;
    }
  }

  const Eigen::MatrixXd chain = l * twist_transform(hand_eye) * jacobian;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(chain, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  IbvsCommand out;
  out.condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  out.rank_deficient = out.condition > cfg.condition_limit;
  const double cutoff = 1e-12 * smax;
  Eigen::VectorXd inv_sv = sv;
  for (int i = 0; i < sv.size(); ++i) inv_sv[i] = sv[i] > cutoff ? 1.0 / sv[i] : 0.0;
  out.qdot = cfg.gamma *
             (svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose() * e);
  return out;
}

}  // namespace viskin
