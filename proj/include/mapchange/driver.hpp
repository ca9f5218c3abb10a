#pragma once

#include <string>

#include "mapchange/config.hpp"
#include "mapchange/metrics.hpp"
#include "mapchange/train.hpp"

namespace mapchange {

// Shared command flows behind both the CLI and the python module: each takes
// paths, does the artifact plumbing (dataset load, checkpoint resume/save,
// train.log), and returns the result.

struct TrainRunSummary {
  int iterations = 0;
  LossBreakdown last_loss;
  std::string checkpoint;  // final checkpoint directory
};

// mode is "mapchange" or "pcc"; resume names a checkpoint directory to
// continue from (its mode, model, and optimizer settings must match).
TrainRunSummary run_training(const RunConfig& cfg, const std::string& data_dir,
                             const std::string& out_dir, const std::string& mode,
                             const std::string& resume);

// mode_override empty means "whatever the checkpoint was trained as".
MetricReport run_evaluation(const std::string& checkpoint_dir, const std::string& data_dir,
                            const std::string& split, const std::string& mode_override,
                            int threads);

// Reads one PPM/PPM/PGM triplet, writes <out_prefix>.trans.pgm (transition
// category ids) and <out_prefix>.prob.pgm (change probability, 0..255).
void run_prediction(const std::string& checkpoint_dir, const std::string& t1_path,
                    const std::string& t2_path, const std::string& map_path,
                    const std::string& out_prefix);

}  // namespace mapchange
