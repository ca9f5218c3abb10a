#include "mapchange/raster.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

void write_netpbm(const std::string& path, const RasterU8& img, const char* magic,
                  int channels) {
  if (img.channels != channels)
    throw ConfigError(std::string(magic) + " wants " + std::to_string(channels) +
                      " channels, raster has " + std::to_string(img.channels));
  if (img.width < 1 || img.height < 1) throw ConfigError("raster has empty dimensions");
  std::size_t expect = static_cast<std::size_t>(img.width) *
                       static_cast<std::size_t>(img.height) *
                       static_cast<std::size_t>(channels);
  if (img.pixels.size() != expect)
    throw ConfigError("raster pixel buffer size mismatch for " + path);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << magic << "\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw DataError("write failed: " + path);
}

int read_pnm_token(std::ifstream& f, const std::string& path) {
  // skips whitespace and '#' comments, then reads one non-negative integer
  int c = f.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = f.get();
    } else if (std::isspace(c)) {
      c = f.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw DataError("malformed netpbm header: " + path);
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1000000) throw DataError("unreasonable netpbm dimension in " + path);
    c = f.get();
  }
  if (c != EOF) f.unget();
  return static_cast<int>(v);
}

RasterU8 read_netpbm(const std::string& path, const char* magic, int channels) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  char m[2];
  f.read(m, 2);
  if (!f || m[0] != magic[0] || m[1] != magic[1])
    throw DataError("bad magic (expected " + std::string(magic) + "): " + path);
  RasterU8 img;
  img.channels = channels;
  img.width = read_pnm_token(f, path);
  img.height = read_pnm_token(f, path);
  int maxval = read_pnm_token(f, path);
  if (maxval != 255) throw DataError("unsupported maxval " + std::to_string(maxval) + ": " + path);
  f.get();  // single whitespace after maxval
  std::size_t count = static_cast<std::size_t>(img.width) *
                      static_cast<std::size_t>(img.height) *
                      static_cast<std::size_t>(channels);
  img.pixels.resize(count);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(f.gcount()) != count)
    throw DataError("truncated pixel data: " + path);
  return img;
}

}  // namespace

void write_ppm(const std::string& path, const RasterU8& img) {
  write_netpbm(path, img, "P6", 3);
}

RasterU8 read_ppm(const std::string& path) { return read_netpbm(path, "P6", 3); }

void write_pgm(const std::string& path, const RasterU8& img) {
  write_netpbm(path, img, "P5", 1);
}

RasterU8 read_pgm(const std::string& path) { return read_netpbm(path, "P5", 1); }

RasterU8 quantize_image(const Tensor& chw) {
  if (chw.rank() != 3) throw ConfigError("quantize_image: expected [C,H,W], got " + chw.shape_str());
  int c = static_cast<int>(chw.dim(0));
  if (c != 1 && c != 3) throw ConfigError("quantize_image: 1 or 3 channels only");
  RasterU8 img;
  img.channels = c;
  img.height = static_cast<int>(chw.dim(1));
  img.width = static_cast<int>(chw.dim(2));
  std::size_t hw = chw.dim(1) * chw.dim(2);
  img.pixels.resize(hw * static_cast<std::size_t>(c));
  for (std::size_t p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) {
      double v = chw[static_cast<std::size_t>(ch) * hw + p];
      v = std::min(1.0, std::max(0.0, v));
      img.pixels[p * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] =
          static_cast<uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

Tensor dequantize_image(const RasterU8& img) {
  std::size_t c = static_cast<std::size_t>(img.channels);
  std::size_t h = static_cast<std::size_t>(img.height);
  std::size_t w = static_cast<std::size_t>(img.width);
  Tensor t({c, h, w});
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t ch = 0; ch < c; ++ch)
      t[ch * h * w + p] = static_cast<double>(img.pixels[p * c + ch]) / 255.0;
  return t;
}

}  // namespace mapchange
