#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mapchange/tensor.hpp"

namespace mapchange {

// Interleaved 8-bit raster; channels is 1 (PGM) or 3 (PPM).
struct RasterU8 {
  int width = 0, height = 0, channels = 1;
  std::vector<uint8_t> pixels;
};

// Binary netpbm, maxval 255.
void write_ppm(const std::string& path, const RasterU8& img);
RasterU8 read_ppm(const std::string& path);
void write_pgm(const std::string& path, const RasterU8& img);
RasterU8 read_pgm(const std::string& path);

// [C,H,W] in [0,1] <-> 8-bit via round(v*255) and v/255.
RasterU8 quantize_image(const Tensor& chw);
Tensor dequantize_image(const RasterU8& img);

}  // namespace mapchange
