#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "mapchange/errors.hpp"
#include "mapchange/raster.hpp"
#include "mapchange/rng.hpp"

using namespace mapchange;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mc_raster_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

RasterU8 random_raster(int w, int h, int channels, uint64_t seed) {
  Rng rng(seed);
  RasterU8 img;
  img.width = w;
  img.height = h;
  img.channels = channels;
  img.pixels.resize(static_cast<std::size_t>(w) * h * channels);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.below(256));
  return img;
}

}  // namespace

TEST_CASE("pgm round trip is bit exact") {
  TempDir tmp;
  RasterU8 img = random_raster(13, 7, 1, 51);
  write_pgm(tmp.file("a.pgm"), img);
  RasterU8 back = read_pgm(tmp.file("a.pgm"));
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  CHECK(back.channels == 1);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("ppm round trip is bit exact") {
  TempDir tmp;
  RasterU8 img = random_raster(9, 11, 3, 52);
  write_ppm(tmp.file("a.ppm"), img);
  RasterU8 back = read_ppm(tmp.file("a.ppm"));
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  CHECK(back.channels == 3);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("headers are the canonical binary netpbm forms") {
  TempDir tmp;
  RasterU8 img = random_raster(4, 2, 3, 53);
  write_ppm(tmp.file("a.ppm"), img);
  std::ifstream f(tmp.file("a.ppm"), std::ios::binary);
  std::string magic;
  int w, h, maxval;
  f >> magic >> w >> h >> maxval;
  CHECK(magic == "P6");
  CHECK(w == 4);
  CHECK(h == 2);
  CHECK(maxval == 255);

  RasterU8 gray = random_raster(4, 2, 1, 54);
  write_pgm(tmp.file("a.pgm"), gray);
  std::ifstream g(tmp.file("a.pgm"), std::ios::binary);
  g >> magic >> w >> h >> maxval;
  CHECK(magic == "P5");
}

TEST_CASE("channel mismatches are rejected") {
  TempDir tmp;
  RasterU8 gray = random_raster(4, 4, 1, 55);
  CHECK_THROWS_AS(write_ppm(tmp.file("x.ppm"), gray), ConfigError);
  RasterU8 color = random_raster(4, 4, 3, 56);
  CHECK_THROWS_AS(write_pgm(tmp.file("x.pgm"), color), ConfigError);

  write_ppm(tmp.file("c.ppm"), color);
  CHECK_THROWS_AS(read_pgm(tmp.file("c.ppm")), DataError);  // P6 magic where P5 expected
}

TEST_CASE("malformed files are rejected") {
  TempDir tmp;
  SUBCASE("missing") { CHECK_THROWS_AS(read_ppm(tmp.file("none.ppm")), DataError); }
  SUBCASE("truncated payload") {
    RasterU8 img = random_raster(8, 8, 3, 57);
    write_ppm(tmp.file("t.ppm"), img);
    fs::resize_file(tmp.file("t.ppm"), 30);
    CHECK_THROWS_AS(read_ppm(tmp.file("t.ppm")), DataError);
  }
  SUBCASE("bad magic") {
    std::ofstream f(tmp.file("bad.ppm"), std::ios::binary);
    f << "P9\n2 2\n255\n0123456789ab";
    f.close();
    CHECK_THROWS_AS(read_ppm(tmp.file("bad.ppm")), DataError);
  }
}

TEST_CASE("quantize/dequantize round trip stays within half a step") {
  Rng rng(58);
  Tensor t({3, 6, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  t[0] = 0.0;
  t[1] = 1.0;  // include the exact endpoints

  RasterU8 q = quantize_image(t);
  CHECK(q.width == 5);
  CHECK(q.height == 6);
  CHECK(q.channels == 3);
  Tensor back = dequantize_image(q);
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(std::fabs(back[i] - t[i]) <= 0.5 / 255.0 + 1e-12);
  }
  CHECK(back[0] == 0.0);
  CHECK(back[1] == 1.0);

  // Quantized values are reproduced exactly by a second trip.
  RasterU8 q2 = quantize_image(back);
  CHECK(q2.pixels == q.pixels);
}

TEST_CASE("quantize clamps out-of-range values") {
  Tensor t({1, 1, 3}, {-0.25, 0.5, 1.75});
  RasterU8 q = quantize_image(t);
  CHECK(q.pixels[0] == 0);
  CHECK(q.pixels[1] == 128);  // round(127.5) away from zero
  CHECK(q.pixels[2] == 255);
}

TEST_CASE("interleaving matches the [C,H,W] planes") {
  Tensor t({3, 1, 2});
  // pixel0 = (0, 0.2, 0.4), pixel1 = (1, 0.8, 0.6) in channel planes
  t[0] = 0.0;
  t[1] = 1.0;  // R plane
  t[2] = 0.2;
  t[3] = 0.8;  // G plane
  t[4] = 0.4;
  t[5] = 0.6;  // B plane
  RasterU8 q = quantize_image(t);
  CHECK(q.pixels[0] == 0);
  CHECK(q.pixels[1] == 51);
  CHECK(q.pixels[2] == 102);
  CHECK(q.pixels[3] == 255);
  CHECK(q.pixels[4] == 204);
  CHECK(q.pixels[5] == 153);
}
