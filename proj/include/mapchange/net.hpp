#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mapchange/params.hpp"
#include "mapchange/tape.hpp"

namespace mapchange {

// Temporal difference operator between the two image feature maps.
enum class DiffOp { Sub, Add, AbsDiff, Concat };
// How the refined change feature is fused with the map feature.
enum class FusionOp { Cat, Add, TstAdd };

DiffOp parse_diff_op(const std::string& s);
FusionOp parse_fusion_op(const std::string& s);
std::string to_string(DiffOp op);
std::string to_string(FusionOp op);

struct ModelConfig {
  int num_classes = 5;
  int base_channels = 16;
  int encoder_stages = 3;  // first stage keeps resolution, later ones halve it
  DiffOp diff_op = DiffOp::AbsDiff;
  FusionOp fusion_op = FusionOp::Cat;
  int tst_heads = 2;
  int tst_dim = 0;  // 0 = same as encoder output channels
  uint64_t seed = 0;

  int encoder_channels() const { return base_channels << (encoder_stages - 1); }
  int downsample() const { return 1 << (encoder_stages - 1); }
  int resolved_tst_dim() const { return tst_dim == 0 ? encoder_channels() : tst_dim; }
  void validate() const;  // throws ConfigError
};

// Binds parameters to tape leaves, one leaf per parameter per pass, so a
// weight used twice (shared encoder, shared decoder) accumulates both
// contributions on a single node.
class Binder {
 public:
  Binder(Tape& tape, bool train) : tape_(&tape), train_(train) {}
  Var operator()(Parameter& p);
  const std::unordered_map<Parameter*, Var>& bound() const { return bound_; }
  Tape& tape() { return *tape_; }
  bool train() const { return train_; }

 private:
  Tape* tape_;
  bool train_;
  std::unordered_map<Parameter*, Var> bound_;
};

struct EncoderTrace {
  Var features;            // deepest stage output
  std::vector<Var> skips;  // outputs of all earlier stages, shallowest first
};

struct TripletOutputVars {
  Var s1_logits;      // [N,K,H,W]
  Var s2_logits;      // [N,K,H,W]
  Var change_logits;  // [N,1,H,W]
};

// The triplet network: shared-weight image encoder f, map encoder g,
// temporal difference, TST refinement, fusion with the map feature, a
// shared semantic decoder and a change decoder.
class TripletNetwork {
 public:
  explicit TripletNetwork(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Stage-level pieces, each usable on its own.
  EncoderTrace encode_image(Binder& b, Var image) const;
  EncoderTrace encode_map(Binder& b, Var map_onehot) const;
  Var temporal_diff(Binder& b, Var e1, Var e2) const;
  Var tst(Binder& b, Var c_diff) const;
  Var fuse(Binder& b, Var c_tst, Var e_map) const;

  TripletOutputVars forward_triplet(Binder& b, Var image1, Var image2, Var map_onehot) const;

  // Convenience: run on a fresh tape without gradients and return values.
  struct TripletValues {
    Tensor s1_logits, s2_logits, change_logits;
  };
  TripletValues infer(const Tensor& image1, const Tensor& image2, const Tensor& map_onehot) const;

 private:
  ModelConfig cfg_;
  mutable ParameterStore params_;
};

// Single-temporal segmentation network (encoder f + semantic decoder) used
// by the post-classification-comparison baseline. Parameter names match the
// triplet network's f/dsem groups, so a shared seed gives bit-identical
// initial weights across the two.
class SingleTemporalNetwork {
 public:
  explicit SingleTemporalNetwork(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Var forward(Binder& b, Var image) const;  // [N,K,H,W] logits
  Tensor infer(const Tensor& image) const;

 private:
  ModelConfig cfg_;
  mutable ParameterStore params_;
};

}  // namespace mapchange
