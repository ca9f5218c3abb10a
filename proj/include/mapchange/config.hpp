#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mapchange/net.hpp"
#include "mapchange/optim.hpp"
#include "mapchange/scene.hpp"

namespace mapchange {

struct PathsConfig {
  std::string dataset_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
};

// Whole-run configuration: one root seed plus the per-module sections.
// parse -> serialize -> parse is the identity.
struct RunConfig {
  uint64_t seed = 42;
  GenConfig gen;
  ModelConfig model;
  OptimConfig optim;
  PathsConfig paths;

  // Copies num_classes into the model section and derives the per-module
  // seeds from the root seed, then validates everything.
  void finalize();
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

// Key=value forms of the generator section, reused by the dataset index echo.
std::vector<std::pair<std::string, std::string>> gen_config_items(const GenConfig& g);
void apply_gen_config_item(GenConfig& g, const std::string& key, const std::string& value);

}  // namespace mapchange
