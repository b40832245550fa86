#include "canm/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace canm {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'N', 'M'};

void put_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("truncated tensor file: " + path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t, DType dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 4);
  uint8_t tag = static_cast<uint8_t>(dtype);
  os.write(reinterpret_cast<const char*>(&tag), 1);
  if (t.ndim() > 255) throw IoError("tensor rank exceeds format limit");
  uint8_t rank = static_cast<uint8_t>(t.ndim());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (size_t d : t.shape()) {
    if (d > 0xffffffffu) throw IoError("dimension exceeds u32 in " + path);
    put_u32_le(os, static_cast<uint32_t>(d));
  }
  if (dtype == DType::f64) {
    os.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
  } else {
    std::vector<float> f(t.numel());
    for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.data()[i]);
    os.write(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
  }
  if (!os) throw IoError("write failed: " + path);
}

Tensor read_tensor(const std::string& path, DType* dtype_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad magic in tensor file: " + path);
  uint8_t tag = 0, rank = 0;
  if (!is.read(reinterpret_cast<char*>(&tag), 1) || !is.read(reinterpret_cast<char*>(&rank), 1))
    throw IoError("truncated tensor file: " + path);
  if (tag > 1) throw IoError("unknown dtype tag " + std::to_string(tag) + " in " + path);
  std::vector<size_t> shape(rank);
  for (auto& d : shape) d = get_u32_le(is, path);
  size_t n = 1;
  for (size_t d : shape) n *= d;
  std::vector<double> data(n);
  if (tag == 0) {
    if (!is.read(reinterpret_cast<char*>(data.data()), n * sizeof(double)))
      throw IoError("truncated tensor file: " + path);
  } else {
    std::vector<float> f(n);
    if (!is.read(reinterpret_cast<char*>(f.data()), n * sizeof(float)))
      throw IoError("truncated tensor file: " + path);
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<double>(f[i]);
  }
  if (dtype_out) *dtype_out = static_cast<DType>(tag);
  return Tensor::from_vector(std::move(shape), std::move(data));
}

}  // namespace canm
