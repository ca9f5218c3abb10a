#pragma once

#include <string>
#include <vector>

#include "mapchange/scene.hpp"
#include "mapchange/tensor.hpp"

namespace mapchange {

struct IndexEntry {
  std::string id, split;
  std::string t1, t2, map, gt1, gt2, chg;  // file names relative to the index
};

struct DatasetIndex {
  int version = 1;
  GenConfig gen;  // generator config echo
  std::vector<IndexEntry> entries;
};

// Writes the full synthetic dataset (rasters + index.txt) into out_dir.
// Samples are independent per-id RNG streams, so the thread count never
// changes the bytes produced.
void generate_dataset(const GenConfig& cfg, const std::string& out_dir, int threads = 1);

void write_index(const std::string& path, const DatasetIndex& index);
// Parses index.txt; verifies every referenced file exists.
DatasetIndex read_index(const std::string& path);

struct Sample {
  std::string id;
  Tensor image1, image2;   // [3,H,W] in [0,1]
  Tensor map_onehot;       // [K,H,W]
  Tensor labels1, labels2; // [H,W] class ids as doubles
  Tensor change;           // [H,W] binary
  SemanticMap map_ids, gt1_ids, gt2_ids, change_ids;  // raw byte rasters
};

// Eagerly loads one split of a generated dataset into memory.
class Dataset {
 public:
  Dataset(const std::string& dir, const std::string& split);

  std::size_t size() const { return samples_.size(); }
  const Sample& at(std::size_t i) const { return samples_[i]; }
  const GenConfig& gen_config() const { return gen_; }
  int num_classes() const { return gen_.num_classes; }
  int tile() const { return gen_.tile; }

  // Stacks samples[idx[0..count)] into batch tensors.
  struct Batch {
    Tensor image1, image2, map_onehot;  // [N,C,H,W]
    Tensor labels1, labels2, change;    // [N,H,W]
  };
  Batch make_batch(const std::vector<std::size_t>& idx) const;

 private:
  GenConfig gen_;
  std::vector<Sample> samples_;
};

}  // namespace mapchange
