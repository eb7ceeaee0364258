#pragma once

#include <filesystem>
#include <iosfwd>

#include "resdense/model.hpp"

namespace resdense {

// "RDNC", u32 version, u32 tensor count, then per tensor a u32 name length,
// the name bytes and the tensor in .ctf layout, then a u32 length and the
// model config as JSON. Buffers are stored alongside parameters.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ResDenseModel<float>& model);
void save_checkpoint(const std::filesystem::path& path, const ResDenseModel<float>& model);

// Rebuilds the skeleton from the stored config and fills it. Any name or
// shape disagreement raises ShapeError naming the first offending tensor.
// A non-null skeleton replaces the stored config as the expected layout.
ResDenseModel<float> read_checkpoint(std::istream& in, const ModelConfig* skeleton = nullptr);
ResDenseModel<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig* skeleton = nullptr);

}  // namespace resdense
