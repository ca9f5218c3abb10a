#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "mapchange/dataset.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/rng.hpp"
#include "mapchange/scene.hpp"

using namespace mapchange;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_gen() {
  GenConfig g;
  g.num_classes = 4;
  g.tile = 32;
  g.n_train = 4;
  g.n_val = 1;
  g.n_test = 2;
  g.seed = 5;
  return g;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("mc_scene_") + tag + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("generate_scene produces valid class maps") {
  GenConfig g = tiny_gen();
  Rng rng(11);
  SemanticMap map = generate_scene(g, rng);
  CHECK(map.width == g.tile);
  CHECK(map.height == g.tile);
  REQUIRE(map.ids.size() == static_cast<std::size_t>(g.tile) * g.tile);
  std::set<uint8_t> classes;
  for (uint8_t id : map.ids) {
    CHECK(id < g.num_classes);
    classes.insert(id);
  }
  CHECK(classes.size() >= 2);  // patches over a background, never a constant map

  Rng rng2(11);
  SemanticMap again = generate_scene(g, rng2);
  CHECK(again.ids == map.ids);
}

TEST_CASE("apply_changes marks exactly the altered pixels") {
  GenConfig g = tiny_gen();
  Rng rng(13);
  SemanticMap t1 = generate_scene(g, rng);
  auto [t2, mask] = apply_changes(t1, g, rng);
  REQUIRE(t2.ids.size() == t1.ids.size());
  REQUIRE(mask.ids.size() == t1.ids.size());

  std::size_t changed = 0;
  for (std::size_t i = 0; i < t1.ids.size(); ++i) {
    CHECK(t2.ids[i] < g.num_classes);
    bool differs = t1.ids[i] != t2.ids[i];
    CHECK(mask.ids[i] == (differs ? 1 : 0));
    changed += differs;
  }
  CHECK(changed > 0);
  CHECK(changed < t1.ids.size());  // changes are regional, not everywhere
}

TEST_CASE("palette colors are pure, distinct, and in range") {
  for (int k : {2, 5, 9}) {
    std::set<std::vector<int>> seen;
    for (int c = 0; c < k; ++c) {
      double rgb[3], rgb2[3];
      palette_color(k, c, rgb);
      palette_color(k, c, rgb2);
      for (int i = 0; i < 3; ++i) {
        CHECK(rgb[i] >= 0.0);
        CHECK(rgb[i] <= 1.0);
        CHECK(rgb[i] == rgb2[i]);
      }
      seen.insert({static_cast<int>(rgb[0] * 1000), static_cast<int>(rgb[1] * 1000),
                   static_cast<int>(rgb[2] * 1000)});
    }
    CHECK(seen.size() == static_cast<std::size_t>(k));
  }
}

TEST_CASE("render_image is deterministic and bounded") {
  GenConfig g = tiny_gen();
  Rng rng(17);
  SemanticMap map = generate_scene(g, rng);

  Tensor a = render_image(map, g, 100, 200);
  Tensor b = render_image(map, g, 100, 200);
  REQUIRE(a.shape() == std::vector<std::size_t>{3, static_cast<std::size_t>(g.tile),
                                                static_cast<std::size_t>(g.tile)});
  CHECK(std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] >= 0.0);
    CHECK(a[i] <= 1.0);
  }

  // Same texture, different epoch: a radiometric re-observation of the same
  // scene. Pixels move, but far less than the spread between classes.
  Tensor c = render_image(map, g, 100, 201);
  double drift = 0;
  for (std::size_t i = 0; i < a.size(); ++i) drift = std::max(drift, std::fabs(a[i] - c[i]));
  CHECK(drift > 0.0);
  CHECK(drift < 0.5);

  // Different texture seed: a different world.
  Tensor d = render_image(map, g, 101, 200);
  CHECK(std::memcmp(a.ptr(), d.ptr(), a.size() * sizeof(double)) != 0);
}

TEST_CASE("one_hot_encode puts a single one in the right channel") {
  SemanticMap map;
  map.width = 3;
  map.height = 2;
  map.ids = {0, 1, 2, 2, 1, 0};
  Tensor oh = one_hot_encode(map, 4);
  REQUIRE(oh.shape() == std::vector<std::size_t>{4, 2, 3});
  for (std::size_t p = 0; p < 6; ++p) {
    double sum = 0;
    for (std::size_t c = 0; c < 4; ++c) sum += oh[c * 6 + p];
    CHECK(sum == 1.0);
    CHECK(oh[map.ids[p] * 6 + p] == 1.0);
  }
  map.ids[0] = 7;  // outside K
  CHECK_THROWS_AS(one_hot_encode(map, 4), ConfigError);
}

TEST_CASE("gen config validation") {
  GenConfig g = tiny_gen();
  CHECK_NOTHROW(g.validate());
  g.num_classes = 1;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = tiny_gen();
  g.tile = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = tiny_gen();
  g.region_size_min = 30;
  g.region_size_max = 20;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = tiny_gen();
  g.gain_min = 1.2;
  g.gain_max = 0.9;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = tiny_gen();
  g.map_noise_frac = 1.5;
  CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("generate_dataset writes a loadable, thread-invariant dataset") {
  GenConfig g = tiny_gen();
  TempDir d1("t1"), d3("t3");
  generate_dataset(g, d1.str(), 1);
  generate_dataset(g, d3.str(), 3);

  // Byte-identical output regardless of worker count.
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(d1.str())) files.push_back(e.path().filename());
  REQUIRE(files.size() == 6 * 7 + 1);  // 7 samples x 6 rasters + index.txt
  for (const auto& name : files) {
    CAPTURE(name.string());
    CHECK(slurp(d1.path / name) == slurp(d3.path / name));
  }

  DatasetIndex idx = read_index(d1.str() + "/index.txt");
  CHECK(idx.entries.size() == 7);
  CHECK(idx.gen.num_classes == g.num_classes);
  CHECK(idx.gen.tile == g.tile);

  int train_count = 0, val_count = 0, test_count = 0;
  for (const auto& e : idx.entries) {
    if (e.split == "train") ++train_count;
    if (e.split == "val") ++val_count;
    if (e.split == "test") ++test_count;
  }
  CHECK(train_count == g.n_train);
  CHECK(val_count == g.n_val);
  CHECK(test_count == g.n_test);
}

TEST_CASE("dataset split loads with consistent tensors") {
  GenConfig g = tiny_gen();
  TempDir dir("load");
  generate_dataset(g, dir.str(), 1);

  Dataset train(dir.str(), "train");
  CHECK(train.size() == 4);
  CHECK(train.num_classes() == g.num_classes);
  CHECK(train.tile() == g.tile);

  const Sample& s = train.at(0);
  const std::size_t t = g.tile;
  CHECK(s.image1.shape() == std::vector<std::size_t>{3, t, t});
  CHECK(s.image2.shape() == std::vector<std::size_t>{3, t, t});
  CHECK(s.map_onehot.shape() ==
        std::vector<std::size_t>{static_cast<std::size_t>(g.num_classes), t, t});
  CHECK(s.labels1.shape() == std::vector<std::size_t>{t, t});
  CHECK(s.change.shape() == std::vector<std::size_t>{t, t});
  for (std::size_t i = 0; i < s.change.size(); ++i) {
    double gt1 = s.labels1[i], gt2 = s.labels2[i];
    CHECK(s.change[i] == (gt1 == gt2 ? 0.0 : 1.0));
  }

  auto batch = train.make_batch({0, 2});
  CHECK(batch.image1.shape() == std::vector<std::size_t>{2, 3, t, t});
  CHECK(batch.labels2.shape() == std::vector<std::size_t>{2, t, t});
  // Stacking copies the per-sample tensors verbatim.
  CHECK(std::memcmp(batch.image1.ptr(), train.at(0).image1.ptr(),
                    train.at(0).image1.size() * sizeof(double)) == 0);

  CHECK_THROWS_AS(Dataset(dir.str(), "nope"), DataError);
  CHECK_THROWS_AS(Dataset("/definitely/missing", "train"), DataError);
}

TEST_CASE("index rejects missing raster files") {
  GenConfig g = tiny_gen();
  TempDir dir("chk");
  generate_dataset(g, dir.str(), 1);
  DatasetIndex idx = read_index(dir.str() + "/index.txt");
  fs::remove(fs::path(dir.str()) / idx.entries[0].t1);
  CHECK_THROWS_AS(read_index(dir.str() + "/index.txt"), DataError);
}
