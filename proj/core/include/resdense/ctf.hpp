#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "resdense/tensor.hpp"

namespace resdense {

// ".ctf" layout: "CTF1", u32 rank, rank x u32 dims, little-endian f32
// row-major payload. Wider tensors are narrowed to f32 on write.
template <typename T>
void write_ctf(std::ostream& out, const Tensor<T>& tensor);

template <typename T>
Tensor<T> read_ctf(std::istream& in);

template <typename T>
void save_ctf(const std::filesystem::path& path, const Tensor<T>& tensor);

template <typename T>
Tensor<T> load_ctf(const std::filesystem::path& path);

namespace binary {

void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in);
void write_f32(std::ostream& out, float value);
float read_f32(std::istream& in);

}  // namespace binary

}  // namespace resdense
