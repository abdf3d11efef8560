#pragma once

#include <json.hpp>

#include "gnnb/models.hpp"

namespace gnnb {

/// JSON <-> ModelConfig. The JSON form is the one the experiment config and
/// checkpoint manifests use.
nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Checkpoint layout: <dir>/manifest.json plus one raw little-endian float64
/// blob per parameter (row-major), named after the parameter.
void save_checkpoint(const TrainedModel& m, const std::string& dir);

/// Loads parameters and rebuilds preprocessing state from the given graph.
/// Refuses a graph whose checksum differs from the recorded one.
TrainedModel load_checkpoint(const std::string& dir, const Graph& g);

}  // namespace gnnb
