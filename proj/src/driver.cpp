#include "mapchange/driver.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "mapchange/checkpoint.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/raster.hpp"

namespace fs = std::filesystem;

namespace mapchange {

namespace {

void require_same_model(const ModelConfig& ckpt, const ModelConfig& cfg) {
  auto key = [](const ModelConfig& m) {
    return std::to_string(m.num_classes) + "/" + std::to_string(m.base_channels) + "/" +
           std::to_string(m.encoder_stages) + "/" + to_string(m.diff_op) + "/" +
           to_string(m.fusion_op) + "/" + std::to_string(m.tst_heads) + "/" +
           std::to_string(m.tst_dim) + "/" + std::to_string(m.seed);
  };
  if (key(ckpt) != key(cfg))
    throw ConfigError("checkpoint model (" + key(ckpt) + ") does not match config (" + key(cfg) +
                      ")");
}

void require_same_optim(const OptimConfig& ckpt, const OptimConfig& cfg) {
  auto key = [](const OptimConfig& o) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.17g/%.17g/%.17g/%d/%d/%.17g/%d/%.17g/%llu", o.base_lr,
                  o.momentum, o.weight_decay, o.batch_size, o.total_iters, o.poly_power,
                  o.checkpoint_interval, o.change_threshold,
                  static_cast<unsigned long long>(o.seed));
    return std::string(buf);
  };
  if (key(ckpt) != key(cfg))
    throw ConfigError("checkpoint optimizer settings do not match the config");
}

SemanticMap raster_to_map(const RasterU8& r, int num_classes, const std::string& path) {
  SemanticMap m;
  m.width = r.width;
  m.height = r.height;
  m.ids = r.pixels;
  for (uint8_t v : m.ids)
    if (v >= num_classes)
      throw DataError(path + ": pixel value " + std::to_string(v) + " is not a class id below " +
                      std::to_string(num_classes));
  return m;
}

}  // namespace

TrainRunSummary run_training(const RunConfig& cfg, const std::string& data_dir,
                             const std::string& out_dir, const std::string& mode,
                             const std::string& resume) {
  if (mode != "mapchange" && mode != "pcc")
    throw ConfigError("mode must be 'mapchange' or 'pcc', got '" + mode + "'");

  Dataset train_split(data_dir, "train");
  int start_iter = 0;
  std::optional<CheckpointMeta> resume_meta;
  if (!resume.empty()) {
    resume_meta = read_checkpoint_meta(resume);
    if (resume_meta->mode != mode)
      throw ConfigError("checkpoint " + resume + " was trained in mode '" + resume_meta->mode +
                        "', not '" + mode + "'");
    require_same_model(resume_meta->model, cfg.model);
    require_same_optim(resume_meta->optim, cfg.optim);
    start_iter = resume_meta->iteration;
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());
  // Appending keeps one continuous log across resumed runs.
  auto log_mode = std::ios::binary | (start_iter > 0 ? std::ios::app : std::ios::trunc);
  std::ofstream log(out_dir + "/train.log", log_mode);
  if (!log) throw DataError("cannot write " + out_dir + "/train.log");

  TrainResult res;
  if (mode == "mapchange") {
    TripletNetwork net(cfg.model);
    if (resume_meta) load_checkpoint(resume, net.params());
    res = train_mapchange(net, train_split, cfg.optim, out_dir, log, start_iter);
  } else {
    SingleTemporalNetwork net(cfg.model);
    if (resume_meta) load_checkpoint(resume, net.params());
    res = train_pcc(net, train_split, cfg.optim, out_dir, log, start_iter);
  }
  return {res.iterations, res.last_loss, res.last_checkpoint};
}

MetricReport run_evaluation(const std::string& checkpoint_dir, const std::string& data_dir,
                            const std::string& split, const std::string& mode_override,
                            int threads) {
  CheckpointMeta meta = read_checkpoint_meta(checkpoint_dir);
  std::string mode = mode_override.empty() ? meta.mode : mode_override;
  if (mode != "mapchange" && mode != "pcc")
    throw ConfigError("mode must be 'mapchange' or 'pcc', got '" + mode + "'");
  if (mode != meta.mode)
    throw ConfigError("checkpoint " + checkpoint_dir + " was trained in mode '" + meta.mode +
                      "', not '" + mode + "'");

  Dataset data(data_dir, split);
  if (mode == "mapchange") {
    TripletNetwork net(meta.model);
    load_checkpoint(checkpoint_dir, net.params());
    return evaluate_mapchange(net, data, meta.optim.change_threshold, threads);
  }
  SingleTemporalNetwork net(meta.model);
  load_checkpoint(checkpoint_dir, net.params());
  return evaluate_pcc(net, data, threads);
}

void run_prediction(const std::string& checkpoint_dir, const std::string& t1_path,
                    const std::string& t2_path, const std::string& map_path,
                    const std::string& out_prefix) {
  CheckpointMeta meta = read_checkpoint_meta(checkpoint_dir);
  if (meta.mode != "mapchange")
    throw ConfigError("predict needs a mapchange checkpoint, got mode '" + meta.mode + "'");
  TripletNetwork net(meta.model);
  load_checkpoint(checkpoint_dir, net.params());

  Tensor t1 = dequantize_image(read_ppm(t1_path));
  Tensor t2 = dequantize_image(read_ppm(t2_path));
  if (t1.dim(1) != t2.dim(1) || t1.dim(2) != t2.dim(2))
    throw DataError("image extents differ: " + t1_path + " vs " + t2_path);
  SemanticMap map_ids = raster_to_map(read_pgm(map_path), meta.model.num_classes, map_path);
  Tensor map_onehot = one_hot_encode(map_ids, meta.model.num_classes);

  Prediction pred =
      infer_mapchange(net, t1, t2, map_onehot, map_ids, meta.optim.change_threshold);

  RasterU8 trans;
  trans.width = pred.width;
  trans.height = pred.height;
  trans.channels = 1;
  trans.pixels = pred.transition;
  write_pgm(out_prefix + ".trans.pgm", trans);

  RasterU8 prob;
  prob.width = pred.width;
  prob.height = pred.height;
  prob.channels = 1;
  prob.pixels.resize(pred.prob.size());
  for (std::size_t i = 0; i < pred.prob.size(); ++i)
    prob.pixels[i] = static_cast<uint8_t>(std::lround(pred.prob[i] * 255.0));
  write_pgm(out_prefix + ".prob.pgm", prob);
}

}  // namespace mapchange
