#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mapchange/checkpoint.hpp"
#include "mapchange/config.hpp"
#include "mapchange/dataset.hpp"
#include "mapchange/metrics.hpp"
#include "mapchange/net.hpp"
#include "mapchange/optim.hpp"

namespace mapchange {

// Worker cap from MAPCHANGE_THREADS; unset or empty means 1.
int env_thread_count();

// Sample order for one epoch: a Fisher-Yates shuffle seeded by
// (seed, epoch), so any iteration's batch is recomputable without
// replaying earlier epochs.
std::vector<std::size_t> epoch_permutation(std::size_t n, uint64_t seed, int epoch);

struct TrainResult {
  int iterations = 0;
  LossBreakdown last_loss;
  std::string last_checkpoint;  // directory of the final checkpoint
};

// Runs iterations [start_iter, total_iters) over the train split. Logs one
// line per step and checkpoints into checkpoint_dir/ckpt-NNNNNN at the
// configured interval and at the end. Resuming from a checkpoint's
// iteration count continues the exact uninterrupted trajectory.
TrainResult train_mapchange(TripletNetwork& net, const Dataset& train, const OptimConfig& cfg,
                            const std::string& checkpoint_dir, std::ostream& log,
                            int start_iter = 0);

// Same loop for the post-classification baseline: one single-temporal
// network fed the pooled (image, label) pairs of both epochs.
TrainResult train_pcc(SingleTemporalNetwork& net, const Dataset& train, const OptimConfig& cfg,
                      const std::string& checkpoint_dir, std::ostream& log, int start_iter = 0);

// One sample's inference output. The T1 side of every transition comes from
// the historical map; s1 logits are computed by the forward pass but do not
// reach the output.
struct Prediction {
  int height = 0, width = 0;
  std::vector<uint8_t> transition;  // encoded category ids, 0 = no change
  std::vector<uint8_t> pred_t2;     // argmax of the T2 semantic logits
  std::vector<uint8_t> change;      // 1 where prob > threshold
  Tensor prob;                      // [H,W] change probability
};

Prediction infer_mapchange(const TripletNetwork& net, const Tensor& image1, const Tensor& image2,
                           const Tensor& map_onehot, const SemanticMap& map_ids,
                           double threshold);

// Transition-matrix evaluation over a split. threads > 1 fans out across
// samples; per-sample counts merge in index order, so the thread count
// never changes the result.
MetricReport evaluate_mapchange(const TripletNetwork& net, const Dataset& data, double threshold,
                                int threads = 1);
MetricReport evaluate_pcc(const SingleTemporalNetwork& net, const Dataset& data, int threads = 1);

struct AblationRow {
  std::string label;
  MetricReport report;
};

// Trains and evaluates the three fusion variants under one shared seed and
// budget; rows come back in the order TST-Add, Add, Cat.
std::vector<AblationRow> ablate_fusion(const RunConfig& cfg, const Dataset& train,
                                       const Dataset& test, const std::string& work_dir,
                                       std::ostream& log);

}  // namespace mapchange
