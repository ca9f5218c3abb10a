#pragma once

#include <string>

#include "mapchange/losses.hpp"
#include "mapchange/net.hpp"
#include "mapchange/optim.hpp"
#include "mapchange/params.hpp"

namespace mapchange {

// Checkpoint = directory with manifest.txt plus one tensor file per
// parameter value and per velocity buffer.
struct CheckpointMeta {
  std::string mode = "mapchange";  // or "pcc"
  int iteration = 0;
  ModelConfig model;
  OptimConfig optim;
  LossBreakdown last_loss;
};

void save_checkpoint(const std::string& dir, const CheckpointMeta& meta,
                     const ParameterStore& params);

// Reads the manifest only (cheap config/mode checks before building a net).
CheckpointMeta read_checkpoint_meta(const std::string& dir);

// Fills an already-registered parameter set. Every stored tensor must match
// a registered parameter in name and shape, and vice versa.
CheckpointMeta load_checkpoint(const std::string& dir, ParameterStore& params);

}  // namespace mapchange
