#include "mapchange/checkpoint.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mapchange/errors.hpp"

namespace fs = std::filesystem;

namespace mapchange {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw DataError("checkpoint manifest: bad number for " + key + ": '" + v + "'");
  return out;
}

long parse_long(const std::string& key, const std::string& v) {
  long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw DataError("checkpoint manifest: bad integer for " + key + ": '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw DataError("checkpoint manifest: bad integer for " + key + ": '" + v + "'");
  return out;
}

}  // namespace

void save_checkpoint(const std::string& dir, const CheckpointMeta& meta,
                     const ParameterStore& params) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "params", ec);
  fs::create_directories(fs::path(dir) / "velocity", ec);
  if (ec) throw DataError("cannot create checkpoint directory " + dir + ": " + ec.message());

  std::ostringstream m;
  m << "format = mapchange-checkpoint-1\n";
  m << "mode = " << meta.mode << "\n";
  m << "iteration = " << meta.iteration << "\n";
  m << "num_classes = " << meta.model.num_classes << "\n";
  m << "base_channels = " << meta.model.base_channels << "\n";
  m << "encoder_stages = " << meta.model.encoder_stages << "\n";
  m << "diff_op = " << to_string(meta.model.diff_op) << "\n";
  m << "fusion_op = " << to_string(meta.model.fusion_op) << "\n";
  m << "tst_heads = " << meta.model.tst_heads << "\n";
  m << "tst_dim = " << meta.model.tst_dim << "\n";
  m << "model_seed = " << meta.model.seed << "\n";
  m << "base_lr = " << fmt_double(meta.optim.base_lr) << "\n";
  m << "momentum = " << fmt_double(meta.optim.momentum) << "\n";
  m << "weight_decay = " << fmt_double(meta.optim.weight_decay) << "\n";
  m << "batch_size = " << meta.optim.batch_size << "\n";
  m << "total_iters = " << meta.optim.total_iters << "\n";
  m << "poly_power = " << fmt_double(meta.optim.poly_power) << "\n";
  m << "checkpoint_interval = " << meta.optim.checkpoint_interval << "\n";
  m << "change_threshold = " << fmt_double(meta.optim.change_threshold) << "\n";
  m << "optim_seed = " << meta.optim.seed << "\n";
  m << "loss_cls1 = " << fmt_double(meta.last_loss.l_cls1) << "\n";
  m << "loss_cls2 = " << fmt_double(meta.last_loss.l_cls2) << "\n";
  m << "loss_dice = " << fmt_double(meta.last_loss.l_dice) << "\n";
  m << "loss_bce = " << fmt_double(meta.last_loss.l_bce) << "\n";
  m << "loss_total = " << fmt_double(meta.last_loss.total) << "\n";
  m << "parameters = " << params.count() << "\n";

  std::ofstream f(dir + "/manifest.txt", std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint manifest in " + dir);
  f << m.str();
  if (!f) throw DataError("write failed: " + dir + "/manifest.txt");
  f.close();

  for (std::size_t i = 0; i < params.count(); ++i) {
    const Parameter& p = params.at(i);
    write_tensor(dir + "/params/" + p.name + ".mct", p.value);
    write_tensor(dir + "/velocity/" + p.name + ".mct", p.velocity);
  }
}

CheckpointMeta read_checkpoint_meta(const std::string& dir) {
  std::ifstream f(dir + "/manifest.txt");
  if (!f) throw DataError("cannot open checkpoint manifest: " + dir + "/manifest.txt");
  CheckpointMeta meta;
  meta.last_loss.l_bcd = 0;
  std::string line;
  bool format_seen = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad manifest line in " + dir + ": " + line);
    auto trim = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (key == "format") {
      if (v != "mapchange-checkpoint-1")
        throw DataError("unsupported checkpoint format in " + dir + ": " + v);
      format_seen = true;
    } else if (key == "mode")
      meta.mode = v;
    else if (key == "iteration")
      meta.iteration = static_cast<int>(parse_long(key, v));
    else if (key == "num_classes")
      meta.model.num_classes = static_cast<int>(parse_long(key, v));
    else if (key == "base_channels")
      meta.model.base_channels = static_cast<int>(parse_long(key, v));
    else if (key == "encoder_stages")
      meta.model.encoder_stages = static_cast<int>(parse_long(key, v));
    else if (key == "diff_op")
      meta.model.diff_op = parse_diff_op(v);
    else if (key == "fusion_op")
      meta.model.fusion_op = parse_fusion_op(v);
    else if (key == "tst_heads")
      meta.model.tst_heads = static_cast<int>(parse_long(key, v));
    else if (key == "tst_dim")
      meta.model.tst_dim = static_cast<int>(parse_long(key, v));
    else if (key == "model_seed")
      meta.model.seed = parse_u64(key, v);
    else if (key == "base_lr")
      meta.optim.base_lr = parse_double(key, v);
    else if (key == "momentum")
      meta.optim.momentum = parse_double(key, v);
    else if (key == "weight_decay")
      meta.optim.weight_decay = parse_double(key, v);
    else if (key == "batch_size")
      meta.optim.batch_size = static_cast<int>(parse_long(key, v));
    else if (key == "total_iters")
      meta.optim.total_iters = static_cast<int>(parse_long(key, v));
    else if (key == "poly_power")
      meta.optim.poly_power = parse_double(key, v);
    else if (key == "checkpoint_interval")
      meta.optim.checkpoint_interval = static_cast<int>(parse_long(key, v));
    else if (key == "change_threshold")
      meta.optim.change_threshold = parse_double(key, v);
    else if (key == "optim_seed")
      meta.optim.seed = parse_u64(key, v);
    else if (key == "loss_cls1")
      meta.last_loss.l_cls1 = parse_double(key, v);
    else if (key == "loss_cls2")
      meta.last_loss.l_cls2 = parse_double(key, v);
    else if (key == "loss_dice")
      meta.last_loss.l_dice = parse_double(key, v);
    else if (key == "loss_bce")
      meta.last_loss.l_bce = parse_double(key, v);
    else if (key == "loss_total")
      meta.last_loss.total = parse_double(key, v);
    else if (key == "parameters") {
      // informational; validated against the store during load
    } else
      throw DataError("unknown manifest key in " + dir + ": " + key);
  }
  if (!format_seen) throw DataError("manifest missing format line: " + dir);
  meta.last_loss.l_bcd = meta.last_loss.l_dice + meta.last_loss.l_bce;
  return meta;
}

CheckpointMeta load_checkpoint(const std::string& dir, ParameterStore& params) {
  CheckpointMeta meta = read_checkpoint_meta(dir);
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter& p = params.at(i);
    Tensor v = read_tensor(dir + "/params/" + p.name + ".mct");
    if (!v.same_shape(p.value))
      throw DataError("checkpoint tensor " + p.name + " has shape " + v.shape_str() +
                      ", expected " + p.value.shape_str());
    p.value = std::move(v);
    Tensor vel = read_tensor(dir + "/velocity/" + p.name + ".mct");
    if (!vel.same_shape(p.velocity))
      throw DataError("checkpoint velocity " + p.name + " has shape " + vel.shape_str() +
                      ", expected " + p.velocity.shape_str());
    p.velocity = std::move(vel);
  }
  // reject checkpoints carrying parameters this model does not have
  std::size_t stored = 0;
  for (const auto& entry : fs::directory_iterator(dir + "/params")) {
    if (!entry.is_regular_file()) continue;
    ++stored;
    std::string name = entry.path().filename().string();
    if (name.size() < 4 || name.substr(name.size() - 4) != ".mct")
      throw DataError("unexpected file in checkpoint: " + entry.path().string());
    if (!params.has(name.substr(0, name.size() - 4)))
      throw DataError("checkpoint parameter " + name + " not present in this model");
  }
  if (stored != params.count())
    throw DataError("checkpoint at " + dir + " stores " + std::to_string(stored) +
                    " parameters, model has " + std::to_string(params.count()));
  return meta;
}

}  // namespace mapchange
