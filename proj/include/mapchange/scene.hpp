#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mapchange/rng.hpp"
#include "mapchange/tensor.hpp"

namespace mapchange {

struct SemanticMap {
  int width = 0, height = 0;
  std::vector<uint8_t> ids;  // row-major class ids, all < K
};

struct GenConfig {
  int num_classes = 5;
  int tile = 64;
  int n_train = 200, n_val = 20, n_test = 50;
  uint64_t seed = 0;
  int patch_count_min = 6, patch_count_max = 12;    // scene layout patches
  int region_count_min = 1, region_count_max = 4;   // changed regions per sample
  int region_size_min = 8, region_size_max = 26;    // changed-region extent, px
  double gain_min = 0.85, gain_max = 1.15;          // per-channel radiometric gain
  double bias_min = -0.08, bias_max = 0.08;
  double noise_sigma = 0.03;
  double shift_max = 0.5;          // sub-pixel bilinear shift, px
  double texture_amp = 0.06;       // per-class texture noise amplitude
  double map_noise_frac = 0.0;     // label noise injected into the stored map

  void validate() const;  // throws ConfigError
};

// Fixed per-class base color, a pure function of (K, class id), RGB in [0,1].
void palette_color(int num_classes, int cls, double rgb[3]);

// K-class map from random rectangles and ellipses over a uniform background.
SemanticMap generate_scene(const GenConfig& cfg, Rng& rng);

// Reassigns whole regions to a different class; second element is the
// binary change mask (1 where the two maps differ).
std::pair<SemanticMap, SemanticMap> apply_changes(const SemanticMap& t1, const GenConfig& cfg,
                                                  Rng& rng);

// Palette + temporally invariant per-class texture (texture_seed), then the
// epoch's radiometric perturbation (epoch_seed): per-channel gain and bias,
// pixel noise, sub-pixel bilinear shift; clamped to [0,1]. Returns [3,H,W].
Tensor render_image(const SemanticMap& map, const GenConfig& cfg, uint64_t texture_seed,
                    uint64_t epoch_seed);

Tensor one_hot_encode(const SemanticMap& map, int num_classes);  // [K,H,W]

}  // namespace mapchange
