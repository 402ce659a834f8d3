#include "ean/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ean {

static_assert(std::endian::native == std::endian::little,
              "tensor file io assumes a little-endian host");

namespace {

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw std::runtime_error("tensor file truncated: " + path);
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  write_bytes(out, "EANT", 4);
  std::uint32_t version = kTensorFormatVersion;
  write_bytes(out, &version, 4);
  std::uint8_t kind = t.dtype() == DType::f32 ? 0 : 1;
  std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  write_bytes(out, &kind, 1);
  write_bytes(out, &rank, 1);
  for (int i = 0; i < t.rank(); ++i) {
    std::uint64_t extent = static_cast<std::uint64_t>(t.dim(i));
    write_bytes(out, &extent, 8);
  }
  if (t.dtype() == DType::f32)
    write_bytes(out, t.vec<float>().data(), t.vec<float>().size() * 4);
  else
    write_bytes(out, t.vec<double>().data(), t.vec<double>().size() * 8);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open tensor file: " + path);
  char magic[4];
  read_bytes(in, magic, 4, path);
  if (std::memcmp(magic, "EANT", 4) != 0)
    throw std::runtime_error("not a tensor file (bad magic): " + path);
  std::uint32_t version = 0;
  read_bytes(in, &version, 4, path);
  if (version != kTensorFormatVersion)
    throw std::runtime_error("unsupported tensor file version " + std::to_string(version) +
                             ": " + path);
  std::uint8_t kind = 0, rank = 0;
  read_bytes(in, &kind, 1, path);
  read_bytes(in, &rank, 1, path);
  if (kind > 1) throw std::runtime_error("unknown element kind in tensor file: " + path);
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) {
    std::uint64_t extent = 0;
    read_bytes(in, &extent, 8, path);
    shape[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(extent);
  }
  Tensor t = Tensor::zeros(shape, kind == 0 ? DType::f32 : DType::f64);
  if (kind == 0)
    read_bytes(in, t.mutable_vec<float>().data(), t.mutable_vec<float>().size() * 4, path);
  else
    read_bytes(in, t.mutable_vec<double>().data(), t.mutable_vec<double>().size() * 8, path);
  return t;
}

}  // namespace ean
