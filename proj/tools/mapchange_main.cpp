#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mapchange/checkpoint.hpp"
#include "mapchange/config.hpp"
#include "mapchange/dataset.hpp"
#include "mapchange/driver.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/metrics.hpp"
#include "mapchange/raster.hpp"
#include "mapchange/train.hpp"

namespace fs = std::filesystem;
using namespace mapchange;

namespace {

RunConfig load_config(const std::string& path, std::optional<uint64_t> seed_override) {
  RunConfig cfg = load_run_config(path);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.finalize();  // derived per-module seeds follow the root seed
  }
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  if (!f) throw DataError("write failed: " + path);
}

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path, seed);
  generate_dataset(cfg.gen, out, env_thread_count());
  std::cout << "wrote " << (cfg.gen.n_train + cfg.gen.n_val + cfg.gen.n_test) << " samples ("
            << cfg.gen.n_train << " train, " << cfg.gen.n_val << " val, " << cfg.gen.n_test
            << " test) to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              const std::string& mode, const std::string& resume, std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path, seed);
  TrainRunSummary res = run_training(cfg, data_dir, out, mode, resume);
  std::cout << "trained " << res.iterations << " iterations, final total loss "
            << res.last_loss.total << "\n";
  if (!res.checkpoint.empty()) std::cout << "checkpoint: " << res.checkpoint << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& mode_flag,
             const std::string& split, const std::string& out) {
  MetricReport report = run_evaluation(ckpt, data_dir, split, mode_flag, env_thread_count());
  std::string mode = mode_flag.empty() ? read_checkpoint_meta(ckpt).mode : mode_flag;
  std::pair<std::string, MetricReport> row{mode, report};
  std::string text = format_report_table({&row, 1}) + format_report_keys(report);
  std::cout << text;
  if (!out.empty()) write_text(out, text);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path, seed);
  Dataset train_split(data_dir, "train");
  Dataset test_split(data_dir, "test");
  std::string work = cfg.paths.checkpoint_dir + "/ablate";
  std::error_code ec;
  fs::create_directories(work, ec);
  if (ec) throw DataError("cannot create " + work + ": " + ec.message());
  std::ofstream log(work + "/train.log", std::ios::binary);
  if (!log) throw DataError("cannot write " + work + "/train.log");

  std::vector<AblationRow> rows = ablate_fusion(cfg, train_split, test_split, work, log);
  std::vector<std::pair<std::string, MetricReport>> table;
  for (const auto& r : rows) table.emplace_back(r.label, r.report);
  std::string text = format_report_table(table);
  std::cout << text;
  write_text(cfg.paths.report_dir + "/ablation.txt", text);
  std::cout << "report: " << cfg.paths.report_dir + "/ablation.txt" << "\n";
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& t1_path, const std::string& t2_path,
                const std::string& map_path, const std::string& out_prefix) {
  run_prediction(ckpt, t1_path, t2_path, map_path, out_prefix);
  std::cout << "wrote " << out_prefix << ".trans.pgm and " << out_prefix << ".prob.pgm\n";
  return 0;
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  double i;
  double f = std::modf(h * 6.0, &i);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (static_cast<int>(i) % 6) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

// Transition category color: gray for no-change, otherwise a golden-angle
// hue walk so nearby ids stay far apart. Pure function of the id alone.
void category_color(int category, uint8_t rgb[3]) {
  if (category == 0) {
    rgb[0] = rgb[1] = rgb[2] = 128;
    return;
  }
  double h = std::fmod(static_cast<double>(category) * 0.6180339887498949, 1.0);
  double c[3];
  hsv_to_rgb(h, 0.85, 0.95, c);
  for (int i = 0; i < 3; ++i) rgb[i] = static_cast<uint8_t>(std::lround(c[i] * 255.0));
}

int cmd_render(const std::string& pred_path, int num_classes, const std::string& out) {
  RasterU8 pred = read_pgm(pred_path);
  TransitionScheme scheme(num_classes);
  RasterU8 img;
  img.width = pred.width;
  img.height = pred.height;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(pred.width) * pred.height * 3);
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    int cat = pred.pixels[i];
    if (cat >= scheme.size())
      throw DataError("category id " + std::to_string(cat) + " outside the " +
                      std::to_string(num_classes) + "-class transition scheme");
    category_color(cat, &img.pixels[i * 3]);
  }
  write_ppm(out, img);

  std::string legend;
  for (int cat = 0; cat < scheme.size(); ++cat) {
    uint8_t rgb[3];
    category_color(cat, rgb);
    char line[96];
    if (cat == 0) {
      std::snprintf(line, sizeof(line), "%3d  no-change       rgb(%3d,%3d,%3d)\n", cat, rgb[0],
                    rgb[1], rgb[2]);
    } else {
      auto [from, to] = scheme.decode(cat);
      std::snprintf(line, sizeof(line), "%3d  class %d -> %d   rgb(%3d,%3d,%3d)\n", cat, from, to,
                    rgb[0], rgb[1], rgb[2]);
    }
    legend += line;
  }
  write_text(out + ".legend.txt", legend);
  std::cout << "wrote " << out << " and " << out << ".legend.txt\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic change detection from bitemporal images and a historical map"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out, mode = "mapchange", resume, ckpt;
  std::string t1_path, t2_path, map_path, pred_path, split = "test", mode_flag;
  std::optional<uint64_t> seed;
  int palette_k = 5;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  gen->add_option("--config", config_path, "Run config file")->required();
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_option("--seed", seed, "Override the root seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Run config file")->required();
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--out", out, "Checkpoint/log output directory")->required();
  train->add_option("--mode", mode, "mapchange or pcc")->capture_default_str();
  train->add_option("--resume", resume, "Checkpoint directory to continue from");
  train->add_option("--seed", seed, "Override the root seed");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--mode", mode_flag, "mapchange or pcc (default: checkpoint's mode)");
  eval_cmd->add_option("--split", split, "Dataset split")->capture_default_str();
  eval_cmd->add_option("--out", out, "Also write the report to this file");

  auto* ablate = app.add_subcommand("ablate", "Train and compare the three fusion variants");
  ablate->add_option("--config", config_path, "Run config file")->required();
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--seed", seed, "Override the root seed");

  auto* predict = app.add_subcommand("predict", "Run inference on one triplet");
  predict->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  predict->add_option("--t1", t1_path, "Epoch 1 image (PPM)")->required();
  predict->add_option("--t2", t2_path, "Epoch 2 image (PPM)")->required();
  predict->add_option("--map", map_path, "Historical map (PGM of class ids)")->required();
  predict->add_option("--out", out, "Output path prefix")->required();

  auto* render = app.add_subcommand("render-change-map", "Colorize a transition-id raster");
  render->add_option("--pred", pred_path, "Transition-id raster (PGM)")->required();
  render->add_option("--palette", palette_k, "Number of semantic classes")->required();
  render->add_option("--out", out, "Output color image (PPM)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // 0 covers --help/--version
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out, seed);
    if (train->parsed()) return cmd_train(config_path, data_dir, out, mode, resume, seed);
    if (eval_cmd->parsed()) return cmd_eval(ckpt, data_dir, mode_flag, split, out);
    if (ablate->parsed()) return cmd_ablate(config_path, data_dir, seed);
    if (predict->parsed()) return cmd_predict(ckpt, t1_path, t2_path, map_path, out);
    if (render->parsed()) return cmd_render(pred_path, palette_k, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
