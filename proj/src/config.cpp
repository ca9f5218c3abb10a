#include "mapchange/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mapchange/errors.hpp"
#include "mapchange/rng.hpp"

namespace mapchange {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError(key + ": expected unsigned integer, got '" + v + "'");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError(key + ": expected integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    throw ConfigError(key + ": expected number, got '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

void apply_run_item(RunConfig& c, const std::string& key, const std::string& v) {
  if (key == "seed")
    c.seed = parse_u64(key, v);
  else
    throw ConfigError("unknown key in [run]: " + key);
}

void apply_model_item(ModelConfig& m, const std::string& key, const std::string& v) {
  if (key == "base_channels")
    m.base_channels = parse_int(key, v);
  else if (key == "encoder_stages")
    m.encoder_stages = parse_int(key, v);
  else if (key == "diff_op")
    m.diff_op = parse_diff_op(v);
  else if (key == "fusion_op")
    m.fusion_op = parse_fusion_op(v);
  else if (key == "tst_heads")
    m.tst_heads = parse_int(key, v);
  else if (key == "tst_dim")
    m.tst_dim = v == "auto" ? 0 : parse_int(key, v);
  else
    throw ConfigError("unknown key in [model]: " + key);
}

void apply_optim_item(OptimConfig& o, const std::string& key, const std::string& v) {
  if (key == "base_lr")
    o.base_lr = parse_double(key, v);
  else if (key == "momentum")
    o.momentum = parse_double(key, v);
  else if (key == "weight_decay")
    o.weight_decay = parse_double(key, v);
  else if (key == "batch_size")
    o.batch_size = parse_int(key, v);
  else if (key == "total_iters")
    o.total_iters = parse_int(key, v);
  else if (key == "poly_power")
    o.poly_power = parse_double(key, v);
  else if (key == "checkpoint_interval")
    o.checkpoint_interval = parse_int(key, v);
  else if (key == "change_threshold")
    o.change_threshold = parse_double(key, v);
  else
    throw ConfigError("unknown key in [optim]: " + key);
}

void apply_paths_item(PathsConfig& p, const std::string& key, const std::string& v) {
  if (key == "dataset_dir")
    p.dataset_dir = v;
  else if (key == "checkpoint_dir")
    p.checkpoint_dir = v;
  else if (key == "report_dir")
    p.report_dir = v;
  else
    throw ConfigError("unknown key in [paths]: " + key);
}

}  // namespace

void apply_gen_config_item(GenConfig& g, const std::string& key, const std::string& v) {
  if (key == "num_classes")
    g.num_classes = parse_int(key, v);
  else if (key == "tile")
    g.tile = parse_int(key, v);
  else if (key == "n_train")
    g.n_train = parse_int(key, v);
  else if (key == "n_val")
    g.n_val = parse_int(key, v);
  else if (key == "n_test")
    g.n_test = parse_int(key, v);
  else if (key == "patch_count_min")
    g.patch_count_min = parse_int(key, v);
  else if (key == "patch_count_max")
    g.patch_count_max = parse_int(key, v);
  else if (key == "region_count_min")
    g.region_count_min = parse_int(key, v);
  else if (key == "region_count_max")
    g.region_count_max = parse_int(key, v);
  else if (key == "region_size_min")
    g.region_size_min = parse_int(key, v);
  else if (key == "region_size_max")
    g.region_size_max = parse_int(key, v);
  else if (key == "gain_min")
    g.gain_min = parse_double(key, v);
  else if (key == "gain_max")
    g.gain_max = parse_double(key, v);
  else if (key == "bias_min")
    g.bias_min = parse_double(key, v);
  else if (key == "bias_max")
    g.bias_max = parse_double(key, v);
  else if (key == "noise_sigma")
    g.noise_sigma = parse_double(key, v);
  else if (key == "shift_max")
    g.shift_max = parse_double(key, v);
  else if (key == "texture_amp")
    g.texture_amp = parse_double(key, v);
  else if (key == "map_noise_frac")
    g.map_noise_frac = parse_double(key, v);
  else
    throw ConfigError("unknown key in [gen]: " + key);
}

std::vector<std::pair<std::string, std::string>> gen_config_items(const GenConfig& g) {
  return {
      {"num_classes", std::to_string(g.num_classes)},
      {"tile", std::to_string(g.tile)},
      {"n_train", std::to_string(g.n_train)},
      {"n_val", std::to_string(g.n_val)},
      {"n_test", std::to_string(g.n_test)},
      {"patch_count_min", std::to_string(g.patch_count_min)},
      {"patch_count_max", std::to_string(g.patch_count_max)},
      {"region_count_min", std::to_string(g.region_count_min)},
      {"region_count_max", std::to_string(g.region_count_max)},
      {"region_size_min", std::to_string(g.region_size_min)},
      {"region_size_max", std::to_string(g.region_size_max)},
      {"gain_min", fmt_double(g.gain_min)},
      {"gain_max", fmt_double(g.gain_max)},
      {"bias_min", fmt_double(g.bias_min)},
      {"bias_max", fmt_double(g.bias_max)},
      {"noise_sigma", fmt_double(g.noise_sigma)},
      {"shift_max", fmt_double(g.shift_max)},
      {"texture_amp", fmt_double(g.texture_amp)},
      {"map_noise_frac", fmt_double(g.map_noise_frac)},
  };
}

void RunConfig::finalize() {
  model.num_classes = gen.num_classes;
  gen.seed = derive_seed(seed, fnv1a64("gen"));
  model.seed = derive_seed(seed, fnv1a64("init"));
  optim.seed = derive_seed(seed, fnv1a64("train"));
  gen.validate();
  model.validate();
  optim.validate();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section");
      section = t.substr(1, t.size() - 2);
      if (section != "run" && section != "gen" && section != "model" && section != "optim" &&
          section != "paths")
        throw ConfigError("unknown section [" + section + "]");
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (section == "run")
      apply_run_item(cfg, key, value);
    else if (section == "gen")
      apply_gen_config_item(cfg.gen, key, value);
    else if (section == "model")
      apply_model_item(cfg.model, key, value);
    else if (section == "optim")
      apply_optim_item(cfg.optim, key, value);
    else if (section == "paths")
      apply_paths_item(cfg.paths, key, value);
    else
      throw ConfigError("line " + std::to_string(lineno) + ": key before any section");
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "[run]\nseed = " << cfg.seed << "\n\n[gen]\n";
  for (const auto& [k, v] : gen_config_items(cfg.gen)) out << k << " = " << v << "\n";
  out << "\n[model]\n";
  out << "base_channels = " << cfg.model.base_channels << "\n";
  out << "encoder_stages = " << cfg.model.encoder_stages << "\n";
  out << "diff_op = " << to_string(cfg.model.diff_op) << "\n";
  out << "fusion_op = " << to_string(cfg.model.fusion_op) << "\n";
  out << "tst_heads = " << cfg.model.tst_heads << "\n";
  out << "tst_dim = ";
  if (cfg.model.tst_dim == 0)
    out << "auto\n";
  else
    out << cfg.model.tst_dim << "\n";
  out << "\n[optim]\n";
  out << "base_lr = " << fmt_double(cfg.optim.base_lr) << "\n";
  out << "momentum = " << fmt_double(cfg.optim.momentum) << "\n";
  out << "weight_decay = " << fmt_double(cfg.optim.weight_decay) << "\n";
  out << "batch_size = " << cfg.optim.batch_size << "\n";
  out << "total_iters = " << cfg.optim.total_iters << "\n";
  out << "poly_power = " << fmt_double(cfg.optim.poly_power) << "\n";
  out << "checkpoint_interval = " << cfg.optim.checkpoint_interval << "\n";
  out << "change_threshold = " << fmt_double(cfg.optim.change_threshold) << "\n";
  out << "\n[paths]\n";
  out << "dataset_dir = " << cfg.paths.dataset_dir << "\n";
  out << "checkpoint_dir = " << cfg.paths.checkpoint_dir << "\n";
  out << "report_dir = " << cfg.paths.report_dir << "\n";
  return out.str();
}

}  // namespace mapchange
