#include "resdense/ctf.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace resdense {
namespace binary {

void write_u32(std::ostream& out, std::uint32_t value) {
  const std::array<char, 4> bytes{static_cast<char>(value & 0xFF), static_cast<char>((value >> 8) & 0xFF),
                                  static_cast<char>((value >> 16) & 0xFF),
                                  static_cast<char>((value >> 24) & 0xFF)};
  out.write(bytes.data(), bytes.size());
}

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError("unexpected end of stream while reading u32");
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_f32(std::ostream& out, float value) { write_u32(out, std::bit_cast<std::uint32_t>(value)); }

float read_f32(std::istream& in) { return std::bit_cast<float>(read_u32(in)); }

}  // namespace binary

namespace {
constexpr std::array<char, 4> kMagic{'C', 'T', 'F', '1'};
}

template <typename T>
void write_ctf(std::ostream& out, const Tensor<T>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  binary::write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) binary::write_u32(out, static_cast<std::uint32_t>(d));
  for (T v : tensor.data()) binary::write_f32(out, static_cast<float>(v));
  if (!out) throw IoError("failed writing ctf tensor");
}

template <typename T>
Tensor<T> read_ctf(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("not a ctf tensor (bad magic)");
  }
  const std::uint32_t rank = binary::read_u32(in);
  if (rank == 0 || rank > 8) throw IoError("ctf tensor has unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = binary::read_u32(in);
    if (d == 0) throw IoError("ctf tensor has a zero dimension");
  }
  const std::size_t n = shape_numel(shape);
  std::vector<T> values(n);
  for (auto& v : values) v = static_cast<T>(binary::read_f32(in));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_ctf(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_ctf(out, tensor);
}

template <typename T>
Tensor<T> load_ctf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_ctf<T>(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

template void write_ctf(std::ostream&, const Tensor<float>&);
template void write_ctf(std::ostream&, const Tensor<double>&);
template Tensor<float> read_ctf(std::istream&);
template Tensor<double> read_ctf(std::istream&);
template void save_ctf(const std::filesystem::path&, const Tensor<float>&);
template void save_ctf(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_ctf(const std::filesystem::path&);
template Tensor<double> load_ctf(const std::filesystem::path&);

}  // namespace resdense
