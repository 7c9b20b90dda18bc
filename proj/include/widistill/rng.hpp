#pragma once

#include <cstdint>
#include <string_view>

namespace widistill {

/// Derives an independent 64-bit seed from a root seed, a purpose label and an
/// index, e.g. derive_seed(root, "teacher", 3). Stable across platforms.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index = 0);

}  // namespace widistill
