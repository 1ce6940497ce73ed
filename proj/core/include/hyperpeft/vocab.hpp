#pragma once

#include <cstdint>

namespace hyperpeft {

using TokenId = std::int32_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
namespace vocab {
inline constexpr TokenId kPad = 256;
inline constexpr TokenId kBos = 257;
inline constexpr TokenId kEos = 258;
inline constexpr TokenId kX = 259;   // precedes an input (or instruction)
inline constexpr TokenId kY = 260;   // precedes a target
inline constexpr TokenId kS0 = 261;  // marks context segment A
inline constexpr TokenId kS1 = 262;  // marks context segment D
inline constexpr int kSize = 263;

constexpr bool is_special(TokenId id) { return id >= 256; }
}  // namespace vocab

}  // namespace hyperpeft
