#include "mapchange/scene.hpp"

#include <algorithm>
#include <cmath>

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

void check_range(const char* name, double lo, double hi) {
  if (lo > hi) throw ConfigError(std::string(name) + " range is not well-ordered");
}

void check_range(const char* name, int lo, int hi) {
  if (lo > hi || lo < 0) throw ConfigError(std::string(name) + " range is not well-ordered");
}

// Deterministic per-pixel noise in [-1,1), independent of evaluation order.
double hash_noise(uint64_t seed, uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  uint64_t s = seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xbf58476d1ce4e5b9ull) ^
               (c * 0x94d049bb133111ebull) ^ (d * 0xd6e8feb86659fd93ull);
  return (splitmix64(s) >> 11) * 0x1.0p-52 - 1.0;
}

struct Patch {
  bool ellipse;
  int cx, cy, rx, ry;
  bool contains(int x, int y) const {
    if (!ellipse) return std::abs(x - cx) <= rx && std::abs(y - cy) <= ry;
    double dx = (x - cx) / static_cast<double>(rx);
    double dy = (y - cy) / static_cast<double>(ry);
    return dx * dx + dy * dy <= 1.0;
  }
};

Patch draw_patch(Rng& rng, int tile, int half_min, int half_max) {
  Patch p;
  p.ellipse = (rng.next() & 1) != 0;
  p.cx = static_cast<int>(rng.below(static_cast<uint64_t>(tile)));
  p.cy = static_cast<int>(rng.below(static_cast<uint64_t>(tile)));
  uint64_t span = static_cast<uint64_t>(half_max - half_min + 1);
  p.rx = half_min + static_cast<int>(rng.below(span));
  p.ry = half_min + static_cast<int>(rng.below(span));
  return p;
}

void paint(SemanticMap& m, const Patch& p, uint8_t cls) {
  int x0 = std::max(0, p.cx - p.rx), x1 = std::min(m.width - 1, p.cx + p.rx);
  int y0 = std::max(0, p.cy - p.ry), y1 = std::min(m.height - 1, p.cy + p.ry);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (p.contains(x, y)) m.ids[static_cast<std::size_t>(y) * m.width + x] = cls;
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  double r = std::fabs(h * 6.0 - 3.0) - 1.0;
  double g = 2.0 - std::fabs(h * 6.0 - 2.0);
  double b = 2.0 - std::fabs(h * 6.0 - 4.0);
  double base[3] = {std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0)};
  for (int i = 0; i < 3; ++i) rgb[i] = ((base[i] - 1.0) * s + 1.0) * v;
}

}  // namespace

void GenConfig::validate() const {
  if (num_classes < 2 || num_classes > 16)
    throw ConfigError("num_classes must be in [2,16], got " + std::to_string(num_classes));
  if (tile < 8 || tile > 4096) throw ConfigError("tile must be in [8,4096]");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("split sizes must be >= 0");
  check_range("patch_count", patch_count_min, patch_count_max);
  check_range("region_count", region_count_min, region_count_max);
  check_range("region_size", region_size_min, region_size_max);
  if (region_size_min < 1) throw ConfigError("region_size must be >= 1");
  check_range("gain", gain_min, gain_max);
  check_range("bias", bias_min, bias_max);
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
  if (shift_max < 0) throw ConfigError("shift_max must be >= 0");
  if (texture_amp < 0) throw ConfigError("texture_amp must be >= 0");
  if (map_noise_frac < 0 || map_noise_frac > 1)
    throw ConfigError("map_noise_frac must be in [0,1]");
}

void palette_color(int num_classes, int cls, double rgb[3]) {
  if (cls < 0 || cls >= num_classes) throw ConfigError("palette_color: class out of range");
  // Evenly spaced hues at muted saturation/value: distinct but close enough
  // that epoch-wise radiometric perturbations make classes confusable from a
  // single image.
  double h = static_cast<double>(cls) / static_cast<double>(num_classes);
  hsv_to_rgb(h, 0.40, 0.50, rgb);
}

SemanticMap generate_scene(const GenConfig& cfg, Rng& rng) {
  SemanticMap m;
  m.width = cfg.tile;
  m.height = cfg.tile;
  uint8_t background = static_cast<uint8_t>(rng.below(static_cast<uint64_t>(cfg.num_classes)));
  m.ids.assign(static_cast<std::size_t>(cfg.tile) * cfg.tile, background);
  uint64_t span = static_cast<uint64_t>(cfg.patch_count_max - cfg.patch_count_min + 1);
  int n = cfg.patch_count_min + static_cast<int>(rng.below(span));
  for (int i = 0; i < n; ++i) {
    uint8_t cls = static_cast<uint8_t>(rng.below(static_cast<uint64_t>(cfg.num_classes)));
    Patch p = draw_patch(rng, cfg.tile, 3, std::max(3, cfg.tile / 3));
    paint(m, p, cls);
  }
  return m;
}

std::pair<SemanticMap, SemanticMap> apply_changes(const SemanticMap& t1, const GenConfig& cfg,
                                                  Rng& rng) {
  SemanticMap t2 = t1;
  uint64_t cspan = static_cast<uint64_t>(cfg.region_count_max - cfg.region_count_min + 1);
  int regions = cfg.region_count_min + static_cast<int>(rng.below(cspan));
  int half_min = std::max(1, cfg.region_size_min / 2);
  int half_max = std::max(half_min, cfg.region_size_max / 2);
  int k = cfg.num_classes;
  for (int r = 0; r < regions; ++r) {
    Patch p = draw_patch(rng, cfg.tile, half_min, half_max);
    // shifting by a nonzero class offset changes every pixel in the region
    int offset = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(k - 1)));
    int x0 = std::max(0, p.cx - p.rx), x1 = std::min(t2.width - 1, p.cx + p.rx);
    int y0 = std::max(0, p.cy - p.ry), y1 = std::min(t2.height - 1, p.cy + p.ry);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (p.contains(x, y)) {
          std::size_t i = static_cast<std::size_t>(y) * t2.width + x;
          t2.ids[i] = static_cast<uint8_t>((t2.ids[i] + offset) % k);
        }
  }
  SemanticMap mask;
  mask.width = t1.width;
  mask.height = t1.height;
  mask.ids.resize(t1.ids.size());
  for (std::size_t i = 0; i < t1.ids.size(); ++i)
    mask.ids[i] = t1.ids[i] != t2.ids[i] ? 1 : 0;
  return {std::move(t2), std::move(mask)};
}

Tensor render_image(const SemanticMap& map, const GenConfig& cfg, uint64_t texture_seed,
                    uint64_t epoch_seed) {
  std::size_t h = static_cast<std::size_t>(map.height), w = static_cast<std::size_t>(map.width);
  std::vector<double> base(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      uint8_t cls = map.ids[y * w + x];
      double rgb[3];
      palette_color(cfg.num_classes, cls, rgb);
      for (std::size_t c = 0; c < 3; ++c)
        base[c * h * w + y * w + x] =
            rgb[c] + cfg.texture_amp * hash_noise(texture_seed, x, y, cls, c);
    }

  Rng er(epoch_seed);
  double gain[3], bias[3];
  for (double& g : gain) g = er.uniform(cfg.gain_min, cfg.gain_max);
  for (double& b : bias) b = er.uniform(cfg.bias_min, cfg.bias_max);
  double dx = cfg.shift_max * er.uniform(-1.0, 1.0);
  double dy = cfg.shift_max * er.uniform(-1.0, 1.0);

  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double sx = std::clamp(static_cast<double>(x) + dx, 0.0, static_cast<double>(w - 1));
      double sy = std::clamp(static_cast<double>(y) + dy, 0.0, static_cast<double>(h - 1));
      std::size_t x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double* plane = base.data() + c * h * w;
        double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
        double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
        double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        v = gain[c] * v + bias[c] + cfg.noise_sigma * er.normal();
        img[c * h * w + y * w + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

Tensor one_hot_encode(const SemanticMap& map, int num_classes) {
  std::size_t h = static_cast<std::size_t>(map.height), w = static_cast<std::size_t>(map.width);
  std::size_t k = static_cast<std::size_t>(num_classes);
  Tensor t({k, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    uint8_t cls = map.ids[i];
    if (cls >= k)
      throw ConfigError("one_hot_encode: class id " + std::to_string(cls) + " >= " +
                        std::to_string(num_classes));
    t[cls * h * w + i] = 1.0;
  }
  return t;
}

}  // namespace mapchange
