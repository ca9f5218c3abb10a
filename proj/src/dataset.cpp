#include "mapchange/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "mapchange/config.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/raster.hpp"
#include "mapchange/rng.hpp"

namespace fs = std::filesystem;

namespace mapchange {

namespace {

RasterU8 map_to_raster(const SemanticMap& m) {
  RasterU8 r;
  r.width = m.width;
  r.height = m.height;
  r.channels = 1;
  r.pixels = m.ids;
  return r;
}

SemanticMap raster_to_map(const RasterU8& r) {
  SemanticMap m;
  m.width = r.width;
  m.height = r.height;
  m.ids = r.pixels;
  return m;
}

void generate_one(const GenConfig& cfg, const std::string& out_dir, const std::string& id) {
  uint64_t sample_seed = derive_seed(cfg.seed, fnv1a64(id));
  Rng scene_rng(derive_seed(sample_seed, 1));
  Rng change_rng(derive_seed(sample_seed, 2));
  uint64_t texture_seed = derive_seed(sample_seed, 3);
  uint64_t epoch1_seed = derive_seed(sample_seed, 4);
  uint64_t epoch2_seed = derive_seed(sample_seed, 5);

  SemanticMap gt1 = generate_scene(cfg, scene_rng);
  auto [gt2, mask] = apply_changes(gt1, cfg, change_rng);

  SemanticMap map = gt1;  // the historical map is the T1 ground truth
  if (cfg.map_noise_frac > 0.0) {
    Rng noise_rng(derive_seed(sample_seed, 6));
    for (auto& id_byte : map.ids)
      if (noise_rng.uniform() < cfg.map_noise_frac)
        id_byte = static_cast<uint8_t>(noise_rng.below(static_cast<uint64_t>(cfg.num_classes)));
  }

  Tensor img1 = render_image(gt1, cfg, texture_seed, epoch1_seed);
  Tensor img2 = render_image(gt2, cfg, texture_seed, epoch2_seed);

  write_ppm(out_dir + "/" + id + "_t1.ppm", quantize_image(img1));
  write_ppm(out_dir + "/" + id + "_t2.ppm", quantize_image(img2));
  write_pgm(out_dir + "/" + id + "_map.pgm", map_to_raster(map));
  write_pgm(out_dir + "/" + id + "_gt1.pgm", map_to_raster(gt1));
  write_pgm(out_dir + "/" + id + "_gt2.pgm", map_to_raster(gt2));
  write_pgm(out_dir + "/" + id + "_chg.pgm", map_to_raster(mask));
}

}  // namespace

void generate_dataset(const GenConfig& cfg, const std::string& out_dir, int threads) {
  cfg.validate();
  if (threads < 1) threads = 1;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create dataset directory " + out_dir + ": " + ec.message());

  DatasetIndex index;
  index.gen = cfg;
  auto add_split = [&](const char* prefix, const char* split, int count) {
    for (int i = 0; i < count; ++i) {
      char id[16];
      std::snprintf(id, sizeof(id), "%s%04d", prefix, i);
      IndexEntry e;
      e.id = id;
      e.split = split;
      e.t1 = e.id + "_t1.ppm";
      e.t2 = e.id + "_t2.ppm";
      e.map = e.id + "_map.pgm";
      e.gt1 = e.id + "_gt1.pgm";
      e.gt2 = e.id + "_gt2.pgm";
      e.chg = e.id + "_chg.pgm";
      index.entries.push_back(std::move(e));
    }
  };
  add_split("tr", "train", cfg.n_train);
  add_split("va", "val", cfg.n_val);
  add_split("te", "test", cfg.n_test);

  if (threads == 1) {
    for (const auto& e : index.entries) generate_one(cfg, out_dir, e.id);
  } else {
    std::vector<std::thread> pool;
    std::size_t n = index.entries.size();
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = static_cast<std::size_t>(t); i < n;
             i += static_cast<std::size_t>(threads))
          generate_one(cfg, out_dir, index.entries[i].id);
      });
    for (auto& th : pool) th.join();
  }

  write_index(out_dir + "/index.txt", index);
}

void write_index(const std::string& path, const DatasetIndex& index) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << "mapchange-index " << index.version << "\n";
  for (const auto& [k, v] : gen_config_items(index.gen)) f << "cfg " << k << "=" << v << "\n";
  for (const auto& e : index.entries)
    f << "sample " << e.id << " " << e.split << " " << e.t1 << " " << e.t2 << " " << e.map << " "
      << e.gt1 << " " << e.gt2 << " " << e.chg << "\n";
  if (!f) throw DataError("write failed: " + path);
}

DatasetIndex read_index(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open index: " + path);
  std::string header;
  if (!std::getline(f, header) || header.rfind("mapchange-index ", 0) != 0)
    throw DataError("not a dataset index: " + path);
  DatasetIndex index;
  index.version = std::atoi(header.c_str() + 16);
  if (index.version != 1)
    throw DataError("unsupported index version in " + path + ": " + header);

  fs::path dir = fs::path(path).parent_path();
  std::string line;
  int lineno = 1;
  std::vector<std::string> seen_ids;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "cfg") {
      std::string kv;
      ss >> kv;
      std::size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw DataError(path + ":" + std::to_string(lineno) + ": bad cfg line");
      apply_gen_config_item(index.gen, kv.substr(0, eq), kv.substr(eq + 1));
    } else if (tag == "sample") {
      IndexEntry e;
      ss >> e.id >> e.split >> e.t1 >> e.t2 >> e.map >> e.gt1 >> e.gt2 >> e.chg;
      if (!ss) throw DataError(path + ":" + std::to_string(lineno) + ": truncated sample line");
      for (const std::string& rel : {e.t1, e.t2, e.map, e.gt1, e.gt2, e.chg}) {
        fs::path p = dir / rel;
        if (!fs::exists(p))
          throw DataError("sample " + e.id + ": missing file " + p.string());
      }
      index.entries.push_back(std::move(e));
    } else {
      throw DataError(path + ":" + std::to_string(lineno) + ": unknown record '" + tag + "'");
    }
  }
  for (const auto& e : index.entries) seen_ids.push_back(e.id);
  std::sort(seen_ids.begin(), seen_ids.end());
  if (std::adjacent_find(seen_ids.begin(), seen_ids.end()) != seen_ids.end())
    throw DataError("duplicate sample id in " + path);
  return index;
}

Dataset::Dataset(const std::string& dir, const std::string& split) {
  DatasetIndex index = read_index(dir + "/index.txt");
  gen_ = index.gen;
  int k = gen_.num_classes;
  for (const auto& e : index.entries) {
    if (e.split != split) continue;
    Sample s;
    s.id = e.id;
    s.image1 = dequantize_image(read_ppm(dir + "/" + e.t1));
    s.image2 = dequantize_image(read_ppm(dir + "/" + e.t2));
    s.map_ids = raster_to_map(read_pgm(dir + "/" + e.map));
    s.gt1_ids = raster_to_map(read_pgm(dir + "/" + e.gt1));
    s.gt2_ids = raster_to_map(read_pgm(dir + "/" + e.gt2));
    s.change_ids = raster_to_map(read_pgm(dir + "/" + e.chg));
    s.map_onehot = one_hot_encode(s.map_ids, k);

    std::size_t h = static_cast<std::size_t>(s.map_ids.height);
    std::size_t w = static_cast<std::size_t>(s.map_ids.width);
    auto to_tensor = [&](const SemanticMap& m, int max_id) {
      Tensor t({h, w});
      for (std::size_t i = 0; i < h * w; ++i) {
        if (m.ids[i] >= max_id)
          throw DataError("sample " + e.id + ": raster value " + std::to_string(m.ids[i]) +
                          " exceeds limit " + std::to_string(max_id));
        t[i] = static_cast<double>(m.ids[i]);
      }
      return t;
    };
    s.labels1 = to_tensor(s.gt1_ids, k);
    s.labels2 = to_tensor(s.gt2_ids, k);
    s.change = to_tensor(s.change_ids, 2);
    samples_.push_back(std::move(s));
  }
  if (samples_.empty())
    throw DataError("dataset at " + dir + " has no samples in split '" + split + "'");
}

Dataset::Batch Dataset::make_batch(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw ConfigError("make_batch: empty index list");
  const Sample& first = samples_.at(idx[0]);
  std::size_t n = idx.size();
  std::size_t h = first.image1.dim(1), w = first.image1.dim(2);
  std::size_t k = first.map_onehot.dim(0);
  Batch b{Tensor({n, 3, h, w}), Tensor({n, 3, h, w}), Tensor({n, k, h, w}),
          Tensor({n, h, w}),    Tensor({n, h, w}),    Tensor({n, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples_.at(idx[i]);
    auto copy_into = [&](Tensor& dst, const Tensor& src) {
      std::copy(src.ptr(), src.ptr() + src.size(), dst.ptr() + i * src.size());
    };
    copy_into(b.image1, s.image1);
    copy_into(b.image2, s.image2);
    copy_into(b.map_onehot, s.map_onehot);
    copy_into(b.labels1, s.labels1);
    copy_into(b.labels2, s.labels2);
    copy_into(b.change, s.change);
  }
  return b;
}

}  // namespace mapchange
