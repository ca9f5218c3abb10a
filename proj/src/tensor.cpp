#include "mapchange/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ConfigError("tensor extents must be positive, got " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_product(shape_) != data.size()) {
    throw ConfigError("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_to_string(shape_));
  }
  data_ = std::move(data);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

constexpr char kMagic[8] = {'M', 'C', 'T', 'E', 'N', 'S', 'R', '1'};

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

template <typename T>
void write_raw(std::ofstream& os, const T* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_raw(std::ifstream& is, T* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_raw(os, kMagic, 8);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  write_raw(os, &rank, 1);
  for (std::size_t d : t.shape()) {
    uint64_t e = d;
    write_raw(os, &e, 1);
  }
  write_raw(os, t.ptr(), t.size());
  if (!os) throw DataError("short write to " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[8];
  read_raw(is, magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError(path + ": bad magic, not a MCTENSR1 tensor file");
  uint32_t rank = 0;
  read_raw(is, &rank, 1);
  if (!is || rank > 8) throw DataError(path + ": unreasonable tensor rank");
  std::vector<std::size_t> shape(rank);
  std::size_t total = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint64_t e = 0;
    read_raw(is, &e, 1);
    if (!is || e == 0 || e > (1ull << 32)) throw DataError(path + ": bad tensor extent");
    shape[i] = static_cast<std::size_t>(e);
    total *= shape[i];
  }
  std::vector<double> data(total);
  read_raw(is, data.data(), total);
  if (!is) throw DataError(path + ": truncated tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace mapchange
