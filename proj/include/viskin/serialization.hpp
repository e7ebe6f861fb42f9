#pragma once

#include <string>

#include <json.hpp>

#include "viskin/model.hpp"
#include "viskin/simulator.hpp"

namespace viskin {

// UTF-8 JSON wire formats. Field names are part of the contract; absent
// optional fields are omitted. ordered_json keeps key order stable so equal
// inputs serialize to identical bytes.
using Json = nlohmann::ordered_json;

Json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const Json& j);

Json model_to_json(const ModelParams& model);
ModelParams model_from_json(const Json& j);

void write_json_file(const std::string& path, const Json& j);
Json read_json_file(const std::string& path);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace viskin
