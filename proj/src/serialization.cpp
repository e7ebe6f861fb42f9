#include "viskin/serialization.hpp"

#include <fstream>

#include "viskin/errors.hpp"

namespace viskin {

namespace {

Json vector_to_json(const Eigen::VectorXd& v) {
  Json arr = Json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::VectorXd vector_from_json(const Json& j) {
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[static_cast<int>(i)] = j[i].get<double>();
  return v;
}

Json pose6_to_json(const Pose6& p) {
  Json out;
  out["xyz"] = {p.xyz[0], p.xyz[1], p.xyz[2]};
  out["rpy"] = {p.rpy[0], p.rpy[1], p.rpy[2]};
  return out;
}

Pose6 pose6_from_json(const Json& j) {
  Pose6 p;
  for (int i = 0; i < 3; ++i) {
    p.xyz[i] = j.at("xyz")[i].get<double>();
    p.rpy[i] = j.at("rpy")[i].get<double>();
  }
  return p;
}

}  // namespace

Json dataset_to_json(const Dataset& data) {
  Json out;
  out["schema_version"] = data.schema_version;
  out["world_id"] = data.world_id;
  out["regime"] = regime_name(data.regime);
  Json records = Json::array();
  for (const DatasetRecord& rec : data.records) {
    Json r;
    r["t"] = rec.t;
    if (rec.joints) r["joints"] = vector_to_json(*rec.joints);
    if (rec.noisy_joints) r["noisy_joints"] = vector_to_json(*rec.noisy_joints);
    if (rec.joint_action) r["joint_action"] = vector_to_json(*rec.joint_action);
    if (rec.cart_action) r["cart_action"] = pose6_to_json(*rec.cart_action);
    if (rec.noisy_pose) r["noisy_pose"] = pose6_to_json(*rec.noisy_pose);
    Json observations = Json::array();
    for (int cam = 0; cam < rec.observation.camera_count(); ++cam) {
      Json view;
      view["camera"] = cam;
      Json features = Json::array();
      for (const PixelFeature& f : rec.observation.cams[cam]) {
        Json feat;
        feat["id"] = f.id;
        feat["u"] = f.u;
        feat["v"] = f.v;
        features.push_back(std::move(feat));
      }
      view["features"] = std::move(features);
      observations.push_back(std::move(view));
    }
    r["observations"] = std::move(observations);
    records.push_back(std::move(r));
  }
  out["records"] = std::move(records);
  return out;
}

Dataset dataset_from_json(const Json& j) {
  Dataset data;
  data.schema_version = j.at("schema_version").get<int>();
  data.world_id = j.at("world_id").get<std::string>();
  data.regime = regime_from_name(j.at("regime").get<std::string>());
  for (const Json& r : j.at("records")) {
    DatasetRecord rec;
    rec.t = r.at("t").get<int>();
    if (r.contains("joints") && !r["joints"].is_null()) rec.joints = vector_from_json(r["joints"]);
    if (r.contains("noisy_joints") && !r["noisy_joints"].is_null())
      rec.noisy_joints = vector_from_json(r["noisy_joints"]);
    if (r.contains("joint_action") && !r["joint_action"].is_null())
      rec.joint_action = vector_from_json(r["joint_action"]);
    if (r.contains("cart_action") && !r["cart_action"].is_null())
      rec.cart_action = pose6_from_json(r["cart_action"]);
    if (r.contains("noisy_pose") && !r["noisy_pose"].is_null())
      rec.noisy_pose = pose6_from_json(r["noisy_pose"]);
    int max_cam = -1;
    for (const Json& view : r.at("observations"))
      max_cam = std::max(max_cam, view.at("camera").get<int>());
    rec.observation.cams.resize(max_cam + 1);
    for (const Json& view : r.at("observations")) {
      CameraObservation& cam_obs = rec.observation.cams[view.at("camera").get<int>()];
      for (const Json& feat : view.at("features"))
        cam_obs.push_back(
            {feat.at("id").get<int>(), feat.at("u").get<double>(), feat.at("v").get<double>()});
    }
    data.records.push_back(std::move(rec));
  }
  return data;
}

Json model_to_json(const ModelParams& model) {
  Json out;
  out["schema_version"] = 1;
  Json dh = Json::array();
  for (const DHRow& row : model.kin.rows) {
    Json r;
    r["omega"] = row.omega;
    r["d"] = row.d;
    r["a"] = row.a;
    r["alpha"] = row.alpha;
    dh.push_back(std::move(r));
  }
  out["dh"] = std::move(dh);
  out["base"] = pose6_to_json(model.kin.base);
  Json structure = Json::array();
  for (int k = 0; k < model.structure.count(); ++k) {
    Json f;
    f["id"] = k;
    f["x"] = model.structure.coords(0, k);
    f["y"] = model.structure.coords(1, k);
    f["z"] = model.structure.coords(2, k);
    structure.push_back(std::move(f));
  }
  out["structure"] = std::move(structure);
  Json cameras = Json::array();
  for (const CameraParams& cam : model.cameras) {
    Json c;
    c["extrinsics"] = pose6_to_json(cam.extrinsics);
    Json k;
    k["fx"] = cam.intrinsics.fx;
    k["fy"] = cam.intrinsics.fy;
    k["px"] = cam.intrinsics.px;
    k["py"] = cam.intrinsics.py;
    c["intrinsics"] = std::move(k);
    cameras.push_back(std::move(c));
  }
  out["cameras"] = std::move(cameras);
  return out;
}

ModelParams model_from_json(const Json& j) {
  ModelParams model;
  for (const Json& r : j.at("dh")) {
    DHRow row;
    row.omega = r.at("omega").get<double>();
    row.d = r.at("d").get<double>();
    row.a = r.at("a").get<double>();
    row.alpha = r.at("alpha").get<double>();
    model.kin.rows.push_back(row);
  }
  model.kin.base = pose6_from_json(j.at("base"));
  const auto& structure = j.at("structure");
  model.structure.coords.resize(3, structure.size());
  for (const Json& f : structure) {
    const int id = f.at("id").get<int>();
    model.structure.coords(0, id) = f.at("x").get<double>();
    model.structure.coords(1, id) = f.at("y").get<double>();
    model.structure.coords(2, id) = f.at("z").get<double>();
  }
  for (const Json& c : j.at("cameras")) {
    CameraParams cam;
    cam.extrinsics = pose6_from_json(c.at("extrinsics"));
    cam.intrinsics.fx = c.at("intrinsics").at("fx").get<double>();
    cam.intrinsics.fy = c.at("intrinsics").at("fy").get<double>();
    cam.intrinsics.px = c.at("intrinsics").at("px").get<double>();
    cam.intrinsics.py = c.at("intrinsics").at("py").get<double>();
    model.cameras.push_back(cam);
  }
  return model;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

}  // namespace viskin
