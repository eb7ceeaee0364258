#pragma once

#include <cstdint>
#include <string_view>

namespace resdense {

// Independent sub-stream seed for a named consumer ("split", "init",
// "augment", "shuffle") of one top-level seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace resdense
